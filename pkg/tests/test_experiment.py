import json
import sys
from pathlib import Path

import numpy as np
import pytest

from dudodp import cli
from dudodp import experiment as ex
from dudodp.diffusion import TemplatePrior
from dudodp.errors import ConfigurationError, DataError
from dudodp.io import read_array
from dudodp.metrics import psnr
from dudodp.phantom import make_metal_mask
from dudodp.tomography import fbp

SMALL = {
    "geometry": {"n_views": 48, "n_bins": 49, "image_size": 32},
    "phantoms": {"count": 2, "seed": 0},
    "metal": {"areas": [20, 4], "centers": [[-0.22, 0.02], [0.22, 0.02]]},
    "prior": {"count": 6, "seed": 500},
    "method": {"steps": 4},
}


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    (root / "cfg.json").write_text(json.dumps(SMALL))
    assert cli.main(["gen", "--config", str(root / "cfg.json"), "-o", str(root / "data")]) == 0
    assert cli.main(["build-prior", "--config", str(root / "cfg.json"), "-o", str(root / "prior")]) == 0
    return root


class TestConfig:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = ex.load_config(overrides=["method.a=0.30000000000000004", "mu_water=0.0192"])
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert ex.load_config(tmp_path / "c.json") == cfg

    def test_overrides(self):
        cfg = ex.load_config(overrides=["method.mode=sino_only", "metal.areas=[10, 5]", "metal.centers=[[0,0],[0.1,0]]"])
        assert cfg["method"]["mode"] == "sino_only" and cfg["metal"]["areas"] == [10, 5]

    @pytest.mark.parametrize("item", ["nope.x=1", "method.a", "method.a=2.0", "geometry=3", "method.mode=z"])
    def test_bad_overrides(self, item):
        with pytest.raises(ConfigurationError):
            ex.load_config(overrides=[item])

    def test_bad_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigurationError):
            ex.load_config(tmp_path / "bad.json")
        with pytest.raises(ConfigurationError):
            ex.load_config(tmp_path / "missing.json")

    def test_leakage_refused(self, tmp_path):
        with pytest.raises(ConfigurationError, match="leak"):
            ex.load_config(overrides=["prior.seed=15"])
        cfg = ex.load_config(overrides=["prior.count=1"])
        with pytest.raises(ConfigurationError):
            ex.build_prior(cfg, tmp_path, test_seeds=[10000])

    def test_desk_area_ladder(self):
        cfg = ex.load_config()
        m = cfg["metal"]
        areas = [int(make_metal_mask(64, a, tuple(c), m["aspect"], m["rotation"]).sum())
                 for a, c in zip(m["areas"], m["centers"])]
        assert areas == m["areas"]
        assert cfg["phantoms"]["count"] * len(areas) == 100
        assert max(areas) / min(areas) >= 30


class TestDataset:
    def test_single_case(self, tmp_path):
        cfg = ex.load_config(overrides=["phantoms.count=1", "metal.areas=[20]", "metal.centers=[[0,0]]",
                                        "geometry.image_size=32", "geometry.n_views=24", "geometry.n_bins=49"])
        manifest = ex.generate_dataset(cfg, tmp_path)
        assert len(manifest["cases"]) == 1
        c = manifest["cases"][0]
        for name in ex.CASE_FILES:
            assert (tmp_path / c[f"{name}_file"]).exists()
        assert len(list((tmp_path / "cases" / c["case"]).glob("*.raw"))) == 6

    def test_manifest_integrity(self, small, tmp_path):
        import shutil
        data = tmp_path / "data"
        shutil.copytree(small / "data", data)
        ex.load_manifest(data)
        c = json.loads((data / "manifest.json").read_text())["cases"][0]
        (data / c["trace_file"]).unlink()
        with pytest.raises(DataError):
            ex.load_manifest(data)

    def test_prior_archive(self, small):
        prior = TemplatePrior.load(small / "prior")
        assert prior.k == 6 and prior.seeds == tuple(range(500, 506))

    def test_prior_single_template(self, tmp_path):
        cfg = ex.load_config(overrides=["prior.count=1"])
        assert ex.build_prior(cfg, tmp_path).k == 1
        assert TemplatePrior.load(tmp_path).k == 1


class TestRuns:
    def test_ma_passthrough(self, small):
        cfg = ex.load_config(small / "data" / "config.json")
        records, _ = ex.run_method(cfg, small / "data", "ma")
        manifest = ex.load_manifest(small / "data")
        geom = ex.geometry_from_config(cfg)
        for rec, entry in zip(records, manifest["cases"]):
            case = ex.load_case(small / "data", entry, geom)
            s0, _ = read_array(small / "data" / entry["ma_sinogram_file"])
            assert rec.psnr == psnr(fbp(s0.astype(float), geom), case.reference)

    def test_run_with_trace(self, small):
        out = small / "run_trace"
        assert cli.main(["run", "--data", str(small / "data"), "--prior", str(small / "prior"), "--emit-trace",
                         "--limit", "2", "-o", str(out)]) == 0
        run = json.loads((out / "run.json").read_text())
        assert [r["seed"] for r in run["runs"]] == [0, 1]
        assert run["runs"][0]["steps"] == 4 and run["runs"][0]["mode"] == "full"
        for r in run["runs"]:
            assert len(list((out / "traces" / r["case"]).glob("step_*.raw"))) == 4
            assert (out / "images" / f"{r['case']}.png").exists()
        assert (out / "scores.csv").read_text().count("\n") == 3

    def test_ablate_rows(self, small):
        out = small / "abl"
        assert cli.main(["ablate", "--data", str(small / "data"), "--prior", str(small / "prior"), "-o", str(out)]) == 0
        rep = json.loads((out / "ablation.json").read_text())
        assert [r["label"] for r in rep["rows"]] == ["a", "b", "c", "d"]
        assert rep["seeds"] == {c: i for i, c in enumerate(sorted(rep["seeds"]))}

    def test_mask_sweep_cells(self, small):
        out = small / "sweep"
        assert cli.main(["mask-sweep", "--data", str(small / "data"), "--prior", str(small / "prior"),
                         "--limit", "1", "-o", str(out)]) == 0
        rep = json.loads((out / "mask_sweep.json").read_text())
        assert len(rep["cells"]) == 10 and sum(c["constant"] for c in rep["cells"]) == 1
        assert {(c["a"], c["n"]) for c in rep["cells"][:9]} == {(a, n) for a in ex.SWEEP_A for n in ex.SWEEP_N}

    def test_report(self, small):
        for m in ("li", "nmar"):
            assert cli.main(["run", "--method", m, "--data", str(small / "data"), "-o", str(small / m)]) == 0
        assert cli.main(["report", str(small / "li"), str(small / "nmar"), "-o", str(small / "rep")]) == 0
        rep = json.loads((small / "rep" / "report.json").read_text())
        assert [r["method"] for r in rep["rows"]] == ["li", "nmar"] and rep["rows"][0]["cases"] == 4

    def test_jobs_do_not_change_output(self, small):
        args = ["run", "--data", str(small / "data"), "--prior", str(small / "prior"), "--limit", "2"]
        assert cli.main(args + ["-o", str(small / "j1")]) == 0
        assert cli.main(args + ["--jobs", "2", "-o", str(small / "j2")]) == 0
        assert tree(small / "j1") == tree(small / "j2")

    def test_rerun_byte_identical(self, small, tmp_path):
        assert cli.main(["gen", "--config", str(small / "cfg.json"), "-o", str(tmp_path / "data")]) == 0
        assert tree(tmp_path / "data") == tree(small / "data")


class TestExitCodes:
    def test_config_error(self, tmp_path):
        assert cli.main(["gen", "--set", "bogus.key=1", "-o", str(tmp_path)]) == 2
        assert cli.main(["gen", "--set", "prior.seed=0", "-o", str(tmp_path)]) == 2

    def test_missing_prior_and_denoiser(self, small, tmp_path):
        assert cli.main(["run", "--data", str(small / "data"), "-o", str(tmp_path)]) == 2

    def test_data_error(self, tmp_path):
        assert cli.main(["run", "--method", "li", "--data", str(tmp_path / "none"), "-o", str(tmp_path / "o")]) == 3

    def test_denoiser_error(self, small, tmp_path):
        cmd = f"{sys.executable} -c pass"
        assert cli.main(["run", "--data", str(small / "data"), "--denoiser", cmd, "--limit", "1",
                         "-o", str(tmp_path)]) == 4

    def test_leaky_prior_refused(self, small, tmp_path):
        cfg = ex.load_config(small / "cfg.json", ["prior.seed=0", "prior.count=1", "phantoms.seed=100"])
        ex.build_prior(cfg, tmp_path / "leaky", test_seeds=[])
        assert cli.main(["run", "--data", str(small / "data"), "--prior", str(tmp_path / "leaky"),
                         "-o", str(tmp_path / "o")]) == 2
