"""Windowed PSNR/SSIM and metal-size grouped reporting.

Both metrics convert to HU, clip to a display window and rescale it to
[0, 1] before comparing, so results do not depend on values outside the
window.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import warnings

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .tomography import MU_WATER, mu_to_hu

WINDOW = (-1000.0, 4208.0)
# lower area bounds (pixels) of the large-to-small groups for the
# 416x416 mask catalogue
BENCHMARK_GROUP_BOUNDS = (1000, 600, 200, 100)

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius 5, an 11x11 support
_SSIM_K1, _SSIM_K2 = 0.01, 0.03


def window_scale(img, lo: float = WINDOW[0], hi: float = WINDOW[1], mu_water: float = MU_WATER) -> np.ndarray:
    """HU-window an attenuation image and map the window onto [0, 1]."""
    if not hi > lo:
        raise ValueError("window must satisfy hi > lo")
    hu = np.clip(mu_to_hu(np.asarray(img, dtype=float), mu_water), lo, hi)
    return (hu - lo) / (hi - lo)


def _pair(x, ref):
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ContractError(f"image shapes differ: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, lo: float = WINDOW[0], hi: float = WINDOW[1], exclude=None,
         mu_water: float = MU_WATER) -> float:
    """Peak signal-to-noise ratio in dB of the windowed images.

    ``exclude`` is an optional boolean mask of pixels left out of the mean
    (e.g. metal).  Identical images give ``inf``.
    """
    x, ref = _pair(x, ref)
    err = (window_scale(x, lo, hi, mu_water) - window_scale(ref, lo, hi, mu_water)) ** 2
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool)
        if keep.shape != x.shape:
            raise ContractError("exclusion mask shape differs from images")
        err = err[keep]
    mse = float(np.mean(err))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(x, ref, lo: float = WINDOW[0], hi: float = WINDOW[1], exclude=None,
         mu_water: float = MU_WATER) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are Gaussian-weighted (population covariances); the
    mean skips a 5-pixel border where the window leaves the image, and any
    ``exclude`` pixels.
    """
    x, ref = _pair(x, ref)
    if min(x.shape) < 11:
        raise ContractError("ssim needs images of at least 11x11 pixels")
    a = window_scale(x, lo, hi, mu_water)
    b = window_scale(ref, lo, hi, mu_water)

    def blur(im):
        return ndimage.gaussian_filter(im, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE, mode="reflect")

    ma, mb = blur(a), blur(b)
    va = blur(a * a) - ma * ma
    vb = blur(b * b) - mb * mb
    cov = blur(a * b) - ma * mb
    c1, c2 = _SSIM_K1**2, _SSIM_K2**2
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    keep = np.zeros(x.shape, dtype=bool)
    keep[5:-5, 5:-5] = True
    if exclude is not None:
        keep &= ~np.asarray(exclude, dtype=bool)
    return float(s[keep].mean())


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else 2.0 * float((a & b).sum()) / float(total)


# ---------------------------------------------------------------------------
# records and grouped tables
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ScoreRecord:
    case: str
    method: str
    psnr: float
    ssim: float
    metal_area_px: int | None
    group: int | None = None


def group_index(area: int, bounds=BENCHMARK_GROUP_BOUNDS) -> int:
    """Index of the first group whose lower bound ``area`` reaches (0 = largest)."""
    for i, b in enumerate(bounds):
        if area >= b:
            return i
    return len(bounds)


def assign_groups(records, bounds=BENCHMARK_GROUP_BOUNDS) -> list[ScoreRecord]:
    return [dataclasses.replace(r, group=None if r.metal_area_px is None else group_index(r.metal_area_px, bounds))
            for r in records]


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def group_report(records, bounds=BENCHMARK_GROUP_BOUNDS) -> dict:
    """Per-group and overall mean PSNR/SSIM.

    Groups run from large to small metal.  The overall mean is taken over
    records, not over group means.  Records without a metal area are
    dropped with a warning.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    kept = [r for r in records if r.metal_area_px is not None]
    if len(kept) < len(records):
        warnings.warn(f"{len(records) - len(kept)} records without metal area excluded", RuntimeWarning)
    groups = []
    for g in range(len(bounds) + 1):
        members = [r for r in kept if group_index(r.metal_area_px, bounds) == g]
        if not members:
            continue
        groups.append({
            "group": g,
            "areas": sorted({r.metal_area_px for r in members}, reverse=True),
            "n": len(members),
            "psnr": _mean([r.psnr for r in members]),
            "ssim": _mean([r.ssim for r in members]),
        })
    return {
        "groups": groups,
        "overall": {"n": len(kept), "psnr": _mean([r.psnr for r in kept]), "ssim": _mean([r.ssim for r in kept])},
    }


def group_areas(areas, bounds=BENCHMARK_GROUP_BOUNDS) -> list[tuple[int, ...]]:
    """Partition metal areas into the large-to-small groups (empty groups dropped)."""
    out: dict[int, list[int]] = {}
    for a in areas:
        out.setdefault(group_index(a, bounds), []).append(a)
    return [tuple(sorted(out[g], reverse=True)) for g in sorted(out)]


CSV_FIELDS = ("case", "method", "psnr", "ssim", "metal_area_px", "group")


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.case, r.method, repr(float(r.psnr)), repr(float(r.ssim)),
                    "" if r.metal_area_px is None else r.metal_area_px,
                    "" if r.group is None else r.group])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ScoreRecord]:
    rows = csv.DictReader(io.StringIO(text))
    return [ScoreRecord(r["case"], r["method"], float(r["psnr"]), float(r["ssim"]),
                        int(r["metal_area_px"]) if r["metal_area_px"] else None,
                        int(r["group"]) if r["group"] else None) for r in rows]
