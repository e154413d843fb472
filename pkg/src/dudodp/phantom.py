"""Procedural phantoms, metal insertion and metal-artifact simulation."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigurationError, ContractError
from .tomography import MU_WATER, Geometry, forward_project, hu_to_mu, mu_to_hu

METAL_HU = 3000.0
METAL_THRESHOLD_HU = 2500.0
TRACE_EPS = 1e-6

# pixel areas of the ten implant masks in the original 416 x 416 benchmark
BENCHMARK_METAL_AREAS = (2061, 890, 881, 451, 254, 124, 118, 112, 53, 35)


@dataclasses.dataclass(frozen=True)
class Ellipse:
    """Ellipse in image-fraction units: centre offsets and semi-axes are
    fractions of the image width, measured from the image centre (y up)."""

    center_x: float
    center_y: float
    semi_x: float
    semi_y: float
    rotation: float
    tissue_hu: float

    def inside(self, x, y):
        """Return True where the points (image fractions) fall inside."""
        dx, dy = x - self.center_x, y - self.center_y
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.semi_x) ** 2 + (v / self.semi_y) ** 2 <= 1.0

    def boundary(self, n: int = 64):
        phi = np.linspace(0, 2 * math.pi, n, endpoint=False)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u, v = self.semi_x * np.cos(phi), self.semi_y * np.sin(phi)
        return self.center_x + u * c - v * s, self.center_y + u * s + v * c


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Overlapping ellipses painted in order; the first one is the body."""

    ellipses: tuple[Ellipse, ...]
    seed: int = 0

    def validate(self) -> None:
        if not self.ellipses:
            raise ConfigurationError("phantom needs at least one ellipse")
        body = self.ellipses[0]
        for e in self.ellipses:
            if not -1000 <= e.tissue_hu <= 3000:
                raise ConfigurationError(f"tissue HU {e.tissue_hu} outside [-1000, 3000]")
            if e.semi_x <= 0 or e.semi_y <= 0:
                raise ConfigurationError("ellipse semi-axes must be positive")
        for e in self.ellipses[1:]:
            bx, by = e.boundary()
            if not np.all(body.inside(bx, by)):
                raise ConfigurationError("body ellipse must enclose all other ellipses")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ellipses": [dataclasses.asdict(e) for e in self.ellipses]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(tuple(Ellipse(**e) for e in d["ellipses"]), int(d.get("seed", 0)))


@dataclasses.dataclass(frozen=True)
class SpectrumModel:
    """Discrete x-ray spectrum with per-bin attenuation scale factors.

    Scale factors multiply the reference-energy attenuation of water-like
    tissue and of metal respectively.
    """

    weights: tuple[float, ...]
    water_scale: tuple[float, ...]
    metal_scale: tuple[float, ...]
    n0: float = 1e6

    def __post_init__(self):
        n = len(self.weights)
        if n == 0 or len(self.water_scale) != n or len(self.metal_scale) != n:
            raise ConfigurationError("spectrum arrays must be nonempty and equally long")
        if not self.n0 > 0:
            raise ConfigurationError("photon count must be positive")
        for arr in (self.weights, self.water_scale, self.metal_scale):
            if min(arr) <= 0:
                raise ConfigurationError("spectrum entries must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigurationError("spectrum weights must sum to 1")


def default_spectrum(n0: float = 1e6) -> SpectrumModel:
    return SpectrumModel(
        weights=(0.15, 0.25, 0.30, 0.20, 0.10),
        water_scale=(1.35, 1.15, 1.0, 0.9, 0.83),
        metal_scale=(3.2, 2.2, 1.6, 1.25, 1.0),
        n0=n0,
    )


def monochromatic_spectrum(n0: float = 1e6) -> SpectrumModel:
    return SpectrumModel(weights=(1.0,), water_scale=(1.0,), metal_scale=(1.0,), n0=n0)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


def _pixel_fractions(size: int, oversample: int):
    """Sub-pixel sample positions in image-fraction units, shape (size*os, size*os)."""
    m = size * oversample
    f = ((np.arange(m) + 0.5) / m) - 0.5
    return f[None, :], -f[:, None]


def generate_phantom(spec: PhantomSpec, size: int, mu_water: float = MU_WATER,
                     oversample: int = 4) -> np.ndarray:
    """Rasterise ``spec`` at ``size`` x ``size`` with ``oversample``^2 samples
    per pixel.  Returns attenuation values; the background is air."""
    spec.validate()
    x, y = _pixel_fractions(size, oversample)
    hu = np.full((size * oversample, size * oversample), -1000.0)
    for e in spec.ellipses:
        hu = np.where(e.inside(x, y), e.tissue_hu, hu)
    hu = hu.reshape(size, oversample, size, oversample).mean(axis=(1, 3))
    return hu_to_mu(hu, mu_water)


def body_support(spec: PhantomSpec, size: int) -> np.ndarray:
    """Pixels whose centre lies inside the body ellipse."""
    x, y = _pixel_fractions(size, 1)
    return np.asarray(spec.ellipses[0].inside(x, y))


@dataclasses.dataclass(frozen=True)
class PhantomFamily:
    """Pelvis-like anatomy with per-seed jitter.

    ``jitter`` scales all random perturbations (positions, sizes and HU);
    0 gives the same phantom for every seed.
    """

    jitter: float = 1.0
    n_lesions: int = 2

    def spec(self, seed: int) -> PhantomSpec:
        rng = np.random.default_rng([seed, 0x5EED])
        j = self.jitter

        def u(scale):
            return float(rng.uniform(-scale, scale)) * j

        bx, by = u(0.01), u(0.01)
        ax, ay = 0.43 + u(0.015), 0.30 + u(0.015)
        rot = u(0.04)
        ell = [
            Ellipse(bx, by, ax, ay, rot, -90 + u(20)),
            Ellipse(bx, by, ax - 0.03, ay - 0.03, rot, 35 + u(10)),
        ]
        for side in (-1, 1):
            hx = bx + side * (0.22 + u(0.015))
            hy = by + 0.02 + u(0.015)
            sx, sy = 0.075 + u(0.008), 0.065 + u(0.008)
            hr = u(0.3)
            ell.append(Ellipse(hx, hy, sx, sy, hr, 950 + u(150)))
            ell.append(Ellipse(hx, hy, 0.6 * sx, 0.6 * sy, hr, 250 + u(60)))
        ell.append(Ellipse(bx + u(0.02), by + 0.1 + u(0.02), 0.08 + u(0.012), 0.06 + u(0.01), u(0.3), 10 + u(8)))
        ell.append(Ellipse(bx + u(0.015), by - 0.2 + u(0.01), 0.085 + u(0.01), 0.045 + u(0.006), u(0.1), 700 + u(120)))
        ell.append(Ellipse(bx + u(0.02), by - 0.1 + u(0.015), 0.03 + u(0.006), 0.025 + u(0.005), 0.0, -650 + u(150)))
        for _ in range(self.n_lesions):
            r = 0.015 + abs(u(0.01))
            ell.append(Ellipse(bx + float(rng.uniform(-0.25, 0.25)), by + float(rng.uniform(-0.15, 0.15)),
                               r, r * (1 + abs(u(0.3))), u(1.5), 70 + u(30)))
        return PhantomSpec(tuple(ell), seed)


# ---------------------------------------------------------------------------
# metal
# ---------------------------------------------------------------------------


def make_metal_mask(size: int, area: int, center=(0.0, 0.0), aspect: float = 1.0,
                    rotation: float = 0.0) -> np.ndarray:
    """Compact elliptical blob with exactly ``area`` pixels.

    ``center`` is in image-fraction units (as :class:`Ellipse`); pixels are
    taken in order of elliptical distance, ties broken by raster index.
    """
    if not 0 <= area <= size * size:
        raise ConfigurationError("metal area out of range")
    x, y = _pixel_fractions(size, 1)
    dx, dy = (x - center[0]) * size, (y - center[1]) * size
    c, s = math.cos(rotation), math.sin(rotation)
    uu = dx * c + dy * s
    vv = (-dx * s + dy * c) * aspect
    d = (uu**2 + vv**2).ravel()
    order = np.argsort(d, kind="stable")
    mask = np.zeros(size * size, dtype=bool)
    mask[order[:area]] = True
    return mask.reshape(size, size)


def insert_metal(img, mask, metal_hu: float = METAL_HU, mu_water: float = MU_WATER) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if img.shape != mask.shape:
        raise ContractError("image and metal mask shapes differ")
    out = img.copy()
    out[mask] = hu_to_mu(metal_hu, mu_water)
    return out


def segment_metal(recon, threshold_hu: float = METAL_THRESHOLD_HU,
                  mu_water: float = MU_WATER) -> np.ndarray:
    return mu_to_hu(recon, mu_water) >= threshold_hu


def compute_trace(mask, geom: Geometry, eps: float = TRACE_EPS, subrays: int = 1) -> np.ndarray:
    """Boolean sinogram of rays that intersect the metal mask."""
    proj = forward_project(np.asarray(mask, dtype=float), geom, subrays=subrays)
    return proj > eps


# ---------------------------------------------------------------------------
# acquisition physics
# ---------------------------------------------------------------------------


def polychromatic_log(path_water, path_metal, spectrum: SpectrumModel) -> np.ndarray:
    """Noise-free ``-ln(I / N0)`` for given water and metal path integrals."""
    total = np.zeros(np.shape(path_water))
    for w, kw, km in zip(spectrum.weights, spectrum.water_scale, spectrum.metal_scale):
        total = total + w * np.exp(-(kw * path_water + km * path_metal))
    return -np.log(total)


def water_correction(sino, spectrum: SpectrumModel, iterations: int = 40) -> np.ndarray:
    """Map polychromatic log-attenuation back to reference-energy water paths.

    Solves ``polychromatic_log(L, 0) = s`` per element by Newton's method
    from ``L = 0``; the map is increasing and concave so the iterates rise
    monotonically to the root.
    """
    s = np.asarray(sino, dtype=float)
    w = np.asarray(spectrum.weights)[:, None]
    k = np.asarray(spectrum.water_scale)[:, None]
    flat = s.ravel()
    path = np.zeros_like(flat)
    for _ in range(iterations):
        e = w * np.exp(-k * path[None, :])
        total = e.sum(axis=0)
        f = -np.log(total) - flat
        slope = (k * e).sum(axis=0) / total
        step = f / slope
        path = path - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(path))):
            break
    return path.reshape(s.shape)


def simulate_metal_sinogram(img_with_metal, spectrum: SpectrumModel, geom: Geometry, seed: int,
                            metal_mask=None, noise: bool = True, subrays: int = 2,
                            correct_water: bool = True, mu_water: float = MU_WATER) -> np.ndarray:
    """Polychromatic, noisy sinogram of an image containing metal.

    Tissue is treated as water-like and metal via its own scale factors.
    Each view draws Poisson counts from ``default_rng([seed, view])``;
    counts are clamped at one photon before taking the log.  With
    ``correct_water`` the log data are linearised for water, as scanners do,
    so metal-free rays agree with the monochromatic reference.
    """
    img = np.asarray(img_with_metal, dtype=float)
    if metal_mask is None:
        metal_mask = segment_metal(img, mu_water=mu_water)
    metal_mask = np.asarray(metal_mask, dtype=bool)
    if metal_mask.shape != img.shape:
        raise ContractError("metal mask shape differs from image")
    p_metal = forward_project(np.where(metal_mask, img, 0.0), geom, subrays)
    p_water = forward_project(np.where(metal_mask, 0.0, img), geom, subrays)

    expected = np.zeros(geom.sino_shape)
    for w, kw, km in zip(spectrum.weights, spectrum.water_scale, spectrum.metal_scale):
        expected += w * spectrum.n0 * np.exp(-(kw * p_water + km * p_metal))
    if noise:
        counts = np.empty_like(expected)
        for v in range(geom.n_views):
            rng = np.random.default_rng([seed, v])
            counts[v] = rng.poisson(expected[v])
    else:
        counts = expected
    sino = -np.log(np.maximum(counts, 1.0) / spectrum.n0)
    if correct_water:
        sino = water_correction(sino, spectrum)
    return sino
