"""DDPM machinery with an x0-predicting denoiser interface.

Timesteps are 1-based (``1..T``); index 0 of every schedule array holds the
``alpha_bar_0 = 1`` convention so that the posterior at ``t = 1`` returns the
clean-image prediction exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .io import atomic_write_bytes, atomic_write_json
from .tomography import MU_WATER, hu_to_mu, mu_to_hu

# flush mixture weights more than this many nats below the largest one
_LOG_WEIGHT_FLOOR = 60.0


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray
    posterior_variances: np.ndarray
    sigma_choice: str = "beta_tilde"

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t)


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 2e-2,
                  sigma_choice: str = "beta_tilde") -> NoiseSchedule:
    """Linear beta schedule from ``beta_1`` to ``beta_T`` over ``T`` steps."""
    if T < 2 or not 0 < beta_1 < beta_T < 1:
        raise ConfigurationError("need T >= 2 and 0 < beta_1 < beta_T < 1")
    if sigma_choice not in ("beta_tilde", "beta"):
        raise ConfigurationError(f"unknown sigma choice {sigma_choice!r}")
    betas = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    alphas_bar = np.cumprod(1.0 - betas)
    post = np.zeros_like(betas)
    post[1:] = (1.0 - alphas_bar[:-1]) / (1.0 - alphas_bar[1:]) * betas[1:]
    for a in (betas, alphas_bar, post):
        a.setflags(write=False)
    return NoiseSchedule(betas, alphas_bar, post, sigma_choice)


def sample_xt(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Draw from q(x_t | x_0) given a caller-supplied unit Gaussian ``eps``."""
    a = schedule.alphas_bar[schedule.check_t(t)]
    return math.sqrt(a) * np.asarray(x0, dtype=float) + math.sqrt(1.0 - a) * np.asarray(eps, dtype=float)


def _pair(schedule: NoiseSchedule, t: int, t_prev: int | None):
    t = schedule.check_t(t)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must lie in [0, {t})")
    a_t, a_p = schedule.alphas_bar[t], schedule.alphas_bar[t_prev]
    beta = schedule.betas[t] if t_prev == t - 1 else 1.0 - a_t / a_p
    return a_t, a_p, beta


def posterior_params(x_t, x0, t: int, schedule: NoiseSchedule, t_prev: int | None = None):
    """Mean and variance of q(x_{t_prev} | x_t, x_0).

    ``t_prev`` defaults to ``t - 1``; other values give the retimed posterior
    used when sampling along a subsequence.
    """
    a_t, a_p, beta = _pair(schedule, t, t_prev)
    x0 = np.asarray(x0, dtype=float)
    if a_p == 1.0:
        return x0.copy(), 0.0
    x_t = np.asarray(x_t, dtype=float)
    c0 = math.sqrt(a_p) * beta / (1.0 - a_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - a_p) / (1.0 - a_t)
    var = (1.0 - a_p) / (1.0 - a_t) * beta
    return c0 * x0 + ct * x_t, var


def ancestral_step(x_t, f, t: int, noise, schedule: NoiseSchedule, t_prev: int | None = None,
                   eta: float = 1.0) -> np.ndarray:
    """Sample x_{t_prev} from q(x_{t_prev} | x_t, f) with ``f`` the x0 prediction.

    ``eta`` scales the noise standard deviation; ``eta = 0`` iterates the
    posterior mean.
    """
    mean, var = posterior_params(x_t, f, t, schedule, t_prev)
    if schedule.sigma_choice == "beta" and var > 0:
        var = _pair(schedule, t, t_prev)[2]
    if var == 0.0 or eta == 0.0:
        return mean
    return mean + eta * math.sqrt(var) * np.asarray(noise, dtype=float)


def eps_to_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.alphas_bar[schedule.check_t(t)]
    return (np.asarray(x_t, dtype=float) - math.sqrt(1.0 - a) * np.asarray(eps_hat, dtype=float)) / math.sqrt(a)


def x0_to_eps(x_t, x0, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.alphas_bar[schedule.check_t(t)]
    return (np.asarray(x_t, dtype=float) - math.sqrt(a) * np.asarray(x0, dtype=float)) / math.sqrt(1.0 - a)


def subsequence_schedule(schedule: NoiseSchedule, k: int) -> list[int]:
    """``k`` evenly strided timesteps, descending from ``T``.

    Element ``i`` (counting from the end) is ``round(i * T / k)``, so ``k = T``
    gives ``[T, ..., 1]`` and ``T = 1000, k = 100`` gives ``[1000, 990, ..., 10]``.
    The sampler steps from the last element to ``t = 0``.
    """
    T = schedule.T
    if not 1 <= k <= T:
        raise ConfigurationError(f"step count {k} outside [1, {T}]")
    steps = [int(round(i * T / k)) for i in range(k, 0, -1)]
    if len(set(steps)) != k:
        raise ConfigurationError(f"cannot stride {T} steps into {k}")
    return steps


# ---------------------------------------------------------------------------
# value normalisation and the template prior
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Normalizer:
    """Affine map from the HU window ``[lo_hu, hi_hu]`` to ``[-1, 1]``."""

    lo_hu: float = -1000.0
    hi_hu: float = 3000.0
    mu_water: float = MU_WATER

    def to_norm(self, mu) -> np.ndarray:
        hu = mu_to_hu(mu, self.mu_water)
        return 2.0 * (hu - self.lo_hu) / (self.hi_hu - self.lo_hu) - 1.0

    def from_norm(self, z) -> np.ndarray:
        hu = (np.asarray(z, dtype=float) + 1.0) * (self.hi_hu - self.lo_hu) / 2.0 + self.lo_hu
        return hu_to_mu(hu, self.mu_water)


@dataclasses.dataclass(frozen=True, eq=False)
class TemplatePrior:
    """Uniform mixture of point masses at the template images (normalised)."""

    templates: np.ndarray
    normalizer: Normalizer = Normalizer()
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.templates, dtype=float)
        if t.ndim != 3 or t.shape[0] < 1:
            raise ConfigurationError("template prior needs a (K, H, W) stack with K >= 1")
        if not np.all(np.isfinite(t)):
            raise ConfigurationError("templates must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "templates", t)

    @property
    def k(self) -> int:
        return self.templates.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.templates.shape[1:]

    @classmethod
    def from_images(cls, images_mu, normalizer: Normalizer = Normalizer(), seeds=()) -> "TemplatePrior":
        stack = np.stack([normalizer.to_norm(im) for im in images_mu])
        return cls(stack, normalizer, tuple(int(s) for s in seeds))

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.templates, dtype="<f4").tobytes()).hexdigest()

    def save(self, directory) -> Path:
        d = Path(directory)
        data = np.ascontiguousarray(self.templates, dtype="<f4").tobytes()
        atomic_write_bytes(d / "templates.raw", data)
        meta = {
            "k": self.k,
            "shape": list(self.shape),
            "normalizer": dataclasses.asdict(self.normalizer),
            "seeds": list(self.seeds),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        atomic_write_json(d / "prior.json", meta)
        return d

    @classmethod
    def load(cls, directory) -> "TemplatePrior":
        d = Path(directory)
        try:
            meta = json.loads((d / "prior.json").read_text())
            data = (d / "templates.raw").read_bytes()
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read prior archive {d}: {exc}") from exc
        if hashlib.sha256(data).hexdigest() != meta["sha256"]:
            raise DataError(f"prior archive {d} fails its checksum")
        h, w = meta["shape"]
        templates = np.frombuffer(data, dtype="<f4").reshape(meta["k"], h, w).astype(float)
        return cls(templates, Normalizer(**meta["normalizer"]), tuple(meta["seeds"]))


def analytic_denoise(prior: TemplatePrior, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact E[x_0 | x_t] under the template mixture and q(x_t | x_0)."""
    if prior.k < 1:
        raise ConfigurationError("empty template prior")
    a = schedule.alphas_bar[schedule.check_t(t)]
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != prior.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match templates {prior.shape}")
    diff = x_t[None] - math.sqrt(a) * prior.templates
    d2 = np.einsum("kij,kij->k", diff, diff)
    logw = -d2 / (2.0 * (1.0 - a)) - math.log(prior.k)
    logw -= logw.max()
    w = np.where(logw < -_LOG_WEIGHT_FLOOR, 0.0, np.exp(logw))
    w /= w.sum()
    return np.tensordot(w, prior.templates, axes=1)


class AnalyticDenoiser:
    """In-process x0 predictor backed by a :class:`TemplatePrior`."""

    def __init__(self, prior: TemplatePrior):
        self.prior = prior

    def __call__(self, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
        return analytic_denoise(self.prior, x_t, t, schedule)


Denoiser = Callable[[np.ndarray, int, NoiseSchedule], np.ndarray]


def _step_list(schedule: NoiseSchedule, steps) -> list[int]:
    if isinstance(steps, int):
        return subsequence_schedule(schedule, steps)
    steps = [int(s) for s in steps]
    if not steps or any(b >= a for a, b in zip(steps, steps[1:])):
        raise ConfigurationError("step list must be nonempty and strictly decreasing")
    return steps


def unconditional_sample(denoiser: Denoiser, schedule: NoiseSchedule, steps: int | Sequence[int],
                         seed: int, shape: tuple[int, int], eta: float = 1.0) -> np.ndarray:
    """Reverse diffusion from seeded x_T ~ N(0, I) down to x_0.

    Each transition samples the retimed posterior q(x_prev | x_t, f); the
    final transition to ``t = 0`` returns the last prediction ``f``.
    """
    seq = _step_list(schedule, steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        f = np.asarray(denoiser(x, t, schedule), dtype=float)
        if f.shape != x.shape or not np.all(np.isfinite(f)):
            raise ValueError(f"denoiser returned an invalid prediction at t={t}")
        if t_prev == 0:
            return f
        x = ancestral_step(x, f, t, rng.standard_normal(shape), schedule, t_prev, eta)
    return x
