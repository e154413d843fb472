import numpy as np
import pytest

from dudodp.tomography import Geometry


@pytest.fixture(scope="session")
def desk_geom():
    return Geometry(96, 97, 64, beam="fan")


@pytest.fixture(scope="session")
def par_geom():
    return Geometry(90, 91, 48, beam="parallel")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a one-line acceptance verdict, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
