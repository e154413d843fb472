"""Dual-domain metal artifact reduction with diffusion priors.

Each reverse-diffusion step takes the denoiser's clean-image prediction
``f`` and

1. inpaints the metal trace of the measured sinogram with ``FP(f)`` and
   reconstructs it (``x_tilde``),
2. blends ``f`` into that reconstruction with a weight mask obtained by
   back-projecting the (scaled) binary trace,
3. blends in the uncorrected image ``y0`` (itself pre-blended with ``f``),
   with a weight that fades out as the noise level drops.

The fused image seeds the next latent via q(x_t | x_0).  All images here
are attenuation values; the denoiser sees them through a
:class:`~dudodp.diffusion.Normalizer`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings

import numpy as np

from .diffusion import Normalizer, NoiseSchedule, ancestral_step, sample_xt, subsequence_schedule
from .errors import ConfigurationError, ContractError, DenoiserUnavailable
from .phantom import segment_metal
from .tomography import MU_WATER, Geometry, fbp, forward_project, hu_to_mu, mu_to_hu

log = logging.getLogger(__name__)

MODES = ("sino_only", "image_only", "sino_plus_prior", "full")
# Table-2 row labels of the ablation
MODE_LABELS = {"sino_only": "a", "image_only": "b", "sino_plus_prior": "c", "full": "d"}
UPDATES = ("marginal", "posterior")


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    """Hyper-parameters of the fusion loop.

    ``update="marginal"`` draws the next latent from q(x_prev | fused image);
    ``"posterior"`` uses q(x_prev | x_t, fused image) instead.
    ``mask_scale`` may be ``"auto"`` to use the maximum of the measured sinogram.
    """

    a: float = 0.4
    n: float = 4.0
    delta_y: float = 0.8
    mask_scale: float | str = 4.0
    mode: str = "full"
    steps: int = 100
    clamp_masks: bool = True
    update: str = "marginal"

    def __post_init__(self):
        if not 0 < self.a <= 1:
            raise ConfigurationError("a must lie in (0, 1]")
        if not self.n > 0:
            raise ConfigurationError("n must be positive")
        if not 0 < self.delta_y <= 1:
            raise ConfigurationError("delta_y must lie in (0, 1]")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.update not in UPDATES:
            raise ConfigurationError(f"update must be one of {UPDATES}")
        if self.mask_scale != "auto" and not float(self.mask_scale) > 0:
            raise ConfigurationError("mask_scale must be positive or 'auto'")


@dataclasses.dataclass(frozen=True, eq=False)
class MarInput:
    s0: np.ndarray
    trace: np.ndarray
    geom: Geometry
    y0: np.ndarray
    gt: np.ndarray | None = None

    @classmethod
    def build(cls, s0, trace, geom: Geometry, gt=None) -> "MarInput":
        s0 = np.asarray(s0, dtype=float)
        trace = np.asarray(trace, dtype=bool)
        if s0.shape != geom.sino_shape or trace.shape != geom.sino_shape:
            raise ContractError("sinogram or trace shape does not match geometry")
        if gt is not None:
            gt = np.asarray(gt, dtype=float)
            if gt.shape != geom.image_shape:
                raise ContractError("ground truth shape does not match geometry")
        return cls(s0, trace, geom, fbp(s0, geom), gt)


@dataclasses.dataclass
class MarTrace:
    """Per-step snapshots, filled when a run is traced."""

    t: list = dataclasses.field(default_factory=list)
    delta: list = dataclasses.field(default_factory=list)
    f: list = dataclasses.field(default_factory=list)
    s_tilde: list = dataclasses.field(default_factory=list)
    x_tilde: list = dataclasses.field(default_factory=list)
    x_prime: list = dataclasses.field(default_factory=list)
    x_dprime: list = dataclasses.field(default_factory=list)

    def __len__(self):
        return len(self.t)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ContractError(f"shape mismatch: {sorted(shapes)}")


def inpaint_sinogram(s0, trace, f, geom: Geometry):
    """Replace trace bins of ``s0`` by ``FP(f)``; returns the sinogram and its FBP."""
    s0 = np.asarray(s0, dtype=float)
    trace = np.asarray(trace, dtype=bool)
    if s0.shape != geom.sino_shape or trace.shape != geom.sino_shape:
        raise ContractError("sinogram or trace shape does not match geometry")
    s_tilde = np.where(trace, forward_project(f, geom), s0)
    return s_tilde, fbp(s_tilde, geom)


def weight_mask(trace, delta: float, geom: Geometry, mask_scale: float = 4.0,
                clamp: bool = True) -> np.ndarray:
    """FBP of the trace filled with ``mask_scale * delta``, optionally clipped to [0, 1]."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    trace = np.asarray(trace, dtype=bool)
    m = fbp(mask_scale * delta * trace.astype(float), geom)
    return np.clip(m, 0.0, 1.0) if clamp else m


def delta_schedule(t: float, T: float, a: float, n: float) -> float:
    """Mask level that rises from ``a`` at ``t = 0`` towards 1 at ``t = T``."""
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if t == 0:
        return float(a)
    return (a - 1.0) * math.exp(-n * t / T) + 1.0


def _blend(w, x, y):
    """``w * x + (1 - w) * y``, returning ``x`` exactly wherever ``x == y``."""
    return np.where(x == y, x, w * x + (1.0 - w) * y)


def fuse_prior(x_tilde, f, m_f) -> np.ndarray:
    """Blend the prediction ``f`` into the inpainted reconstruction with mask ``m_f``."""
    _same_shape(x_tilde, f, m_f)
    m_f = np.asarray(m_f, dtype=float)
    return m_f * np.asarray(f, dtype=float) + (1.0 - m_f) * np.asarray(x_tilde, dtype=float)


def fuse_ma(f, y0, m_y, x_prime, alpha_bar: float) -> np.ndarray:
    """Blend the prior-enhanced ``y0`` into ``x_prime`` with weight ``1 - sqrt(alpha_bar)``."""
    _same_shape(f, y0, m_y, x_prime)
    if not 0 < alpha_bar <= 1:
        raise ValueError("alpha_bar must lie in (0, 1]")
    y_prime = fuse_prior(y0, f, m_y)
    return _blend(math.sqrt(alpha_bar), np.asarray(x_prime, dtype=float), y_prime)


def restore_metal(img, y0, mu_water: float = MU_WATER) -> np.ndarray:
    """Copy the thresholded metal pixels of ``y0`` into ``img``."""
    out = np.array(img, dtype=float)
    metal = segment_metal(y0, mu_water=mu_water)
    out[metal] = np.asarray(y0, dtype=float)[metal]
    return out


# ---------------------------------------------------------------------------
# the iterative algorithm
# ---------------------------------------------------------------------------


def dudodp_run(inp: MarInput, denoiser, schedule: NoiseSchedule, cfg: FusionConfig, seed: int,
               normalizer: Normalizer = Normalizer(), record: bool = False):
    """Run the dual-domain reverse diffusion on one case.

    Returns ``(image, trace)``; ``trace`` is a :class:`MarTrace` when
    ``record`` is true and ``None`` otherwise.
    """
    geom = inp.geom
    shape = geom.image_shape
    seq = subsequence_schedule(schedule, cfg.steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)

    scale = float(np.max(inp.s0)) if cfg.mask_scale == "auto" else float(cfg.mask_scale)
    masks: dict[float, np.ndarray] = {}

    def mask(delta):
        if delta not in masks:
            masks[delta] = weight_mask(inp.trace, delta, geom, scale, cfg.clamp_masks)
        return masks[delta]

    m_y = mask(cfg.delta_y)
    rec = MarTrace() if record else None
    out = inp.y0
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        try:
            f_norm = np.asarray(denoiser(x, t, schedule), dtype=float)
        except DenoiserUnavailable as exc:
            raise DenoiserUnavailable(f"denoiser failed at step {i} (t={t}): {exc}") from exc
        if f_norm.shape != shape or not np.all(np.isfinite(f_norm)):
            raise DenoiserUnavailable(f"invalid denoiser output at step {i} (t={t})")
        f = normalizer.from_norm(f_norm)
        a_t = float(schedule.alphas_bar[t])
        delta = delta_schedule(t, schedule.T, cfg.a, cfg.n)

        s_tilde = x_tilde = x_prime = None
        if cfg.mode != "image_only":
            s_tilde, x_tilde = inpaint_sinogram(inp.s0, inp.trace, f, geom)
        if cfg.mode == "sino_only":
            out = x_tilde
        elif cfg.mode == "image_only":
            out = fuse_prior(inp.y0, f, m_y)
        else:
            x_prime = fuse_prior(x_tilde, f, mask(delta))
            out = x_prime if cfg.mode == "sino_plus_prior" else fuse_ma(f, inp.y0, m_y, x_prime, a_t)

        if rec is not None:
            rec.t.append(t)
            rec.delta.append(delta)
            rec.f.append(f)
            rec.s_tilde.append(s_tilde)
            rec.x_tilde.append(x_tilde)
            rec.x_prime.append(x_prime)
            rec.x_dprime.append(out)

        if t_prev == 0:
            break
        z = normalizer.to_norm(out)
        noise = rng.standard_normal(shape)
        if cfg.update == "marginal":
            x = sample_xt(z, t_prev, noise, schedule)
        else:
            x = ancestral_step(x, z, t, noise, schedule, t_prev)

    return restore_metal(out, inp.y0, normalizer.mu_water), rec


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------


def li_inpaint(sino, trace) -> np.ndarray:
    """Linearly interpolate each view row across its trace bins.

    Runs touching the detector edge are extended with the nearest value.  A
    row with no unaffected bin is filled with the mean of all unaffected bins.
    """
    sino = np.asarray(sino, dtype=float)
    trace = np.asarray(trace, dtype=bool)
    _same_shape(sino, trace)
    out = sino.copy()
    bins = np.arange(sino.shape[1])
    full_rows = []
    for v in range(sino.shape[0]):
        hit = trace[v]
        if not hit.any():
            continue
        if hit.all():
            full_rows.append(v)
            continue
        out[v, hit] = np.interp(bins[hit], bins[~hit], sino[v, ~hit])
    if full_rows:
        warnings.warn(f"{len(full_rows)} view rows are entirely inside the metal trace", RuntimeWarning)
        fill = sino[~trace].mean() if (~trace).any() else 0.0
        out[full_rows] = fill
    return out


def li_baseline(s0, trace, geom: Geometry) -> np.ndarray:
    return fbp(li_inpaint(s0, trace), geom)


def nmar_prior(img, air_hu: float = -500.0, bone_hu: float = 300.0,
               mu_water: float = MU_WATER) -> np.ndarray:
    """Three-class prior: air -> -1000 HU, soft tissue -> 0 HU, bone kept."""
    hu = mu_to_hu(img, mu_water)
    prior = np.where(hu < air_hu, -1000.0, np.where(hu < bone_hu, 0.0, hu))
    return hu_to_mu(prior, mu_water)


def nmar_baseline(s0, trace, geom: Geometry, eps: float = 1e-3, air_hu: float = -500.0,
                  bone_hu: float = 300.0, mu_water: float = MU_WATER) -> np.ndarray:
    """Normalised interpolation against a tissue-classified prior image."""
    s0 = np.asarray(s0, dtype=float)
    trace = np.asarray(trace, dtype=bool)
    prior = nmar_prior(li_baseline(s0, trace, geom), air_hu, bone_hu, mu_water)
    p = forward_project(prior, geom)
    low = p < eps
    if np.any(low & trace):
        warnings.warn("prior projection near zero inside the trace; clamping", RuntimeWarning)
    p = np.maximum(p, eps)
    completed = li_inpaint(s0 / p, trace) * p
    return fbp(np.where(trace, completed, s0), geom)
