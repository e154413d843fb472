"""Out-of-process denoisers over line-delimited JSON on stdin/stdout.

Handshake ``{"hello": {"shape": [h, w], "T": 1000}}`` -> ``{"ready": true}``;
each request ``{"denoise": {"t": 618, "file": "<x_t>"}}`` is answered with
``{"done": {"file": "<f>"}}``.  Arrays travel as float32 files in the format
of :mod:`dudodp.io`.

Run a reference plugin with ``python -m dudodp.plugin echo`` or
``python -m dudodp.plugin template --prior DIR``.
"""

from __future__ import annotations

import argparse
import json
import queue
import shutil
import subprocess
import sys
import tempfile
import threading
from pathlib import Path

import numpy as np

from .errors import DenoiserUnavailable
from .io import read_array, write_array

DEFAULT_TIMEOUT = 30.0


class ExternalDenoiser:
    """Client for one plugin process; one request in flight at a time.

    Use as a context manager, or call :meth:`close` when done.
    """

    def __init__(self, command, shape, T: int, timeout: float = DEFAULT_TIMEOUT):
        self.command = list(command)
        self.shape = tuple(shape)
        self.T = int(T)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._lines: queue.Queue = queue.Queue()
        self._count = 0
        self._tmp = Path(tempfile.mkdtemp(prefix="dudodp-plugin-"))
        try:
            self.proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as exc:
            shutil.rmtree(self._tmp, ignore_errors=True)
            raise DenoiserUnavailable(f"cannot start plugin {self.command}: {exc}") from exc
        threading.Thread(target=self._pump, daemon=True).start()
        reply = self._roundtrip({"hello": {"shape": list(self.shape), "T": self.T}})
        if reply.get("ready") is not True:
            self.close()
            raise DenoiserUnavailable(f"plugin handshake failed: {reply!r}")

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _roundtrip(self, msg: dict) -> dict:
        try:
            self.proc.stdin.write(json.dumps(msg) + "\n")
            self.proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise DenoiserUnavailable(f"plugin is not accepting requests: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise DenoiserUnavailable(f"plugin timed out after {self.timeout} s") from None
        if line is None:
            raise DenoiserUnavailable(f"plugin exited (code {self.proc.poll()})")
        try:
            reply = json.loads(line)
        except ValueError as exc:
            raise DenoiserUnavailable(f"malformed plugin response {line!r}") from exc
        if not isinstance(reply, dict):
            raise DenoiserUnavailable(f"malformed plugin response {line!r}")
        return reply

    def __call__(self, x_t, t: int, schedule=None) -> np.ndarray:
        x_t = np.asarray(x_t)
        if x_t.shape != self.shape:
            raise DenoiserUnavailable(f"x_t shape {x_t.shape} does not match plugin shape {self.shape}")
        with self._lock:
            self._count += 1
            path = write_array(self._tmp / f"xt_{self._count:06d}", x_t, "image", "mu")
            reply = self._roundtrip({"denoise": {"t": int(t), "file": str(path)}})
            try:
                out_file = reply["done"]["file"]
                f, _ = read_array(out_file)
            except Exception as exc:
                raise DenoiserUnavailable(f"bad plugin reply {reply!r}: {exc}") from exc
        if f.shape != self.shape:
            raise DenoiserUnavailable(f"plugin returned shape {f.shape}, expected {self.shape}")
        if not np.all(np.isfinite(f)):
            raise DenoiserUnavailable("plugin returned non-finite values")
        return f.astype(float)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        shutil.rmtree(self._tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# reference plugin servers
# ---------------------------------------------------------------------------


def serve(predict, stdin=sys.stdin, stdout=sys.stdout) -> None:
    """Answer protocol requests with ``predict(x_t, t, T)`` until EOF."""
    T = None
    for line in stdin:
        if not line.strip():
            continue
        msg = json.loads(line)
        if "hello" in msg:
            T = int(msg["hello"]["T"])
            reply = {"ready": True}
        elif "denoise" in msg:
            req = msg["denoise"]
            x_t, _ = read_array(req["file"])
            f = predict(x_t, int(req["t"]), T)
            out = write_array(Path(req["file"]).with_name(Path(req["file"]).stem + "_f"), f, "image", "mu")
            reply = {"done": {"file": str(out)}}
        else:
            reply = {"error": "unknown request"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m dudodp.plugin", description=__doc__.split("\n")[0])
    p.add_argument("mode", choices=["echo", "template"])
    p.add_argument("--prior", help="template prior directory (template mode)")
    p.add_argument("--beta-1", type=float, default=1e-4)
    p.add_argument("--beta-T", type=float, default=2e-2)
    args = p.parse_args(argv)

    if args.mode == "echo":
        serve(lambda x, t, T: x)
        return 0

    from .diffusion import TemplatePrior, analytic_denoise, make_schedule

    prior = TemplatePrior.load(args.prior)
    schedules = {}

    def predict(x, t, T):
        if T not in schedules:
            schedules[T] = make_schedule(T, args.beta_1, args.beta_T)
        return analytic_denoise(prior, x.astype(float), t, schedules[T])

    serve(predict)
    return 0


if __name__ == "__main__":
    sys.exit(main())
