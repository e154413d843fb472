"""Flat float32 array files with JSON sidecars, and atomic writes.

An array ``foo`` is stored as ``foo.raw`` (little-endian float32, row-major)
next to ``foo.json``::

    {"shape": [h, w], "kind": "image", "units": "mu", "geometry": {...}}
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

KINDS = ("image", "sinogram")
UNITS = ("mu", "hu", "line_integral", "mask")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode())


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".raw", ".json") else path


def write_array(path, arr, kind: str, units: str, geometry=None) -> Path:
    """Write ``arr`` as ``<path>.raw`` plus ``<path>.json``; returns the .raw path."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if units not in UNITS:
        raise ValueError(f"units must be one of {UNITS}")
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("only 2-D arrays are supported")
    stem = _stem(path)
    meta = {"shape": list(arr.shape), "kind": kind, "units": units}
    if geometry is not None:
        meta["geometry"] = geometry.to_dict() if hasattr(geometry, "to_dict") else dict(geometry)
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(stem.with_suffix(".raw"), data)
    atomic_write_json(stem.with_suffix(".json"), meta)
    return stem.with_suffix(".raw")


def read_array(path) -> tuple[np.ndarray, dict]:
    """Read an array written by :func:`write_array` (returned as float32)."""
    stem = _stem(path)
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".raw").read_bytes()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read array {stem}: {exc}") from exc
    shape = tuple(meta.get("shape", ()))
    if len(shape) != 2 or len(raw) != 4 * shape[0] * shape[1]:
        raise DataError(f"{stem}: payload size does not match shape {shape}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return arr, meta
