"""Discrete 2-D CT system model.

Forward projection uses Joseph's method (linear interpolation along the
driving axis) and is stored as a sparse system matrix per geometry, so the
unfiltered back-projection is its exact transpose.  Filtered back-projection
uses a pixel-driven, distance-weighted back-projector, which is the standard
discretisation for both parallel and equiangular fan beams.

Image arrays are indexed ``[row, col]`` with row 0 at the top; pixel centres
sit at ``x = (col - c) * ps`` and ``y = (c - row) * ps`` with ``c = (N - 1) / 2``.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ContractError

MU_WATER = 0.0192

BEAM_MODES = ("parallel", "fan")

# margin on the detector extent beyond the reconstruction circle
_DETECTOR_MARGIN = 1.05


@dataclasses.dataclass(frozen=True)
class Geometry:
    """Scanner geometry for a square image and a views x bins sinogram.

    ``detector_spacing`` is a length for parallel beams and an angle (radians)
    for equiangular fan beams.  ``source_to_center``, ``detector_spacing`` and
    ``recon_circle_radius`` (pixels) are filled with defaults when omitted.
    """

    n_views: int
    n_bins: int
    image_size: int
    beam: str = "fan"
    pixel_spacing: float = 1.0
    angle_start: float = 0.0
    angle_end: float = 2 * math.pi
    source_to_center: float | None = None
    detector_spacing: float | None = None
    recon_circle_radius: float | None = None

    def __post_init__(self):
        if self.beam not in BEAM_MODES:
            raise ConfigurationError(f"unknown beam mode {self.beam!r}")
        if self.n_views < 1 or self.n_bins < 1:
            raise ConfigurationError("n_views and n_bins must be >= 1")
        if self.image_size < 2:
            raise ConfigurationError("image_size must be >= 2")
        if not self.pixel_spacing > 0:
            raise ConfigurationError("pixel_spacing must be positive")
        if not self.angle_end > self.angle_start:
            raise ConfigurationError("angle_end must exceed angle_start")

        set_ = functools.partial(object.__setattr__, self)
        for name in ("n_views", "n_bins", "image_size"):
            set_(name, int(getattr(self, name)))
        for name in ("pixel_spacing", "angle_start", "angle_end"):
            set_(name, float(getattr(self, name)))

        half = self.image_size * self.pixel_spacing / 2
        if self.recon_circle_radius is None:
            set_("recon_circle_radius", self.image_size / 2)
        set_("recon_circle_radius", float(self.recon_circle_radius))
        if self.recon_circle_radius <= 0:
            raise ConfigurationError("recon_circle_radius must be positive")
        r_len = self.recon_circle_radius * self.pixel_spacing

        if self.beam == "fan":
            if self.source_to_center is None:
                set_("source_to_center", 3.0 * half)
            set_("source_to_center", float(self.source_to_center))
            if self.source_to_center <= half * math.sqrt(2):
                raise ConfigurationError("fan-beam source must lie outside the image")
            if self.detector_spacing is None:
                gamma_max = _DETECTOR_MARGIN * math.asin(min(1.0, r_len / self.source_to_center))
                set_("detector_spacing", 2 * gamma_max / max(self.n_bins - 1, 1))
        else:
            if self.source_to_center is not None:
                set_("source_to_center", float(self.source_to_center))
            if self.detector_spacing is None:
                set_("detector_spacing", 2 * _DETECTOR_MARGIN * r_len / max(self.n_bins - 1, 1))
        set_("detector_spacing", float(self.detector_spacing))
        if not self.detector_spacing > 0:
            raise ConfigurationError("detector_spacing must be positive")

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_bins)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def view_step(self) -> float:
        return (self.angle_end - self.angle_start) / self.n_views

    @property
    def angles(self) -> np.ndarray:
        return self.angle_start + self.view_step * np.arange(self.n_views)

    @property
    def bin_positions(self) -> np.ndarray:
        """Detector coordinate of each bin centre (length or fan angle)."""
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2) * self.detector_spacing

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(**d)


def hu_to_mu(hu, mu_water: float = MU_WATER):
    if not mu_water > 0:
        raise ConfigurationError("mu_water must be positive")
    return mu_water * (1 + np.asarray(hu, dtype=float) / 1000)


def mu_to_hu(mu, mu_water: float = MU_WATER):
    if not mu_water > 0:
        raise ConfigurationError("mu_water must be positive")
    return (np.asarray(mu, dtype=float) / mu_water - 1) * 1000


def recon_mask(geom: Geometry) -> np.ndarray:
    """Boolean mask of pixels whose centres lie inside the reconstruction circle."""
    c = (geom.image_size - 1) / 2
    i, j = np.mgrid[: geom.image_size, : geom.image_size]
    return (i - c) ** 2 + (j - c) ** 2 <= geom.recon_circle_radius ** 2


def _check_image(img, geom: Geometry) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.shape != geom.image_shape:
        raise ContractError(f"image shape {img.shape} does not match geometry {geom.image_shape}")
    return img


def _check_sino(sino, geom: Geometry) -> np.ndarray:
    sino = np.asarray(sino, dtype=float)
    if sino.shape != geom.sino_shape:
        raise ContractError(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    return sino


# ---------------------------------------------------------------------------
# ray geometry
# ---------------------------------------------------------------------------


def _rays(geom: Geometry, view: int, offset: float):
    """Anchor points and unit directions of every ray in one view."""
    angle = geom.angles[view]
    pos = geom.bin_positions + offset * geom.detector_spacing
    if geom.beam == "parallel":
        e_u = np.array([math.cos(angle), math.sin(angle)])
        d = np.array([-math.sin(angle), math.cos(angle)])
        points = pos[:, None] * e_u[None, :]
        dirs = np.broadcast_to(d, points.shape)
    else:
        src = geom.source_to_center * np.array([math.cos(angle), math.sin(angle)])
        points = np.broadcast_to(src, (geom.n_bins, 2))
        dirs = -np.stack([np.cos(angle + pos), np.sin(angle + pos)], axis=1)
    return points, dirs


def _joseph_entries(points, dirs, n: int, ps: float):
    """Sparse (ray, pixel, weight) triplets for lines through an n x n grid."""
    c = (n - 1) / 2
    grid = (np.arange(n) - c) * ps
    ray_ids, pix_ids, vals = [], [], []

    xdrive = np.abs(dirs[:, 0]) >= np.abs(dirs[:, 1])
    for driving_x in (True, False):
        sel = np.nonzero(xdrive == driving_x)[0]
        if sel.size == 0:
            continue
        p, d = points[sel], dirs[sel]
        a, b = (0, 1) if driving_x else (1, 0)
        # step along the driving axis; the other coordinate is interpolated
        if driving_x:
            t = (grid[None, :] - p[:, a : a + 1]) / d[:, a : a + 1]
            other = p[:, b : b + 1] + t * d[:, b : b + 1]
            frac_idx = c - other / ps
        else:
            t = ((-grid)[None, :] - p[:, a : a + 1]) / d[:, a : a + 1]
            other = p[:, b : b + 1] + t * d[:, b : b + 1]
            frac_idx = other / ps + c
        length = ps / np.abs(d[:, a])
        lo = np.floor(frac_idx)
        w_hi = frac_idx - lo
        lo = lo.astype(np.int64)
        drive_idx = np.broadcast_to(np.arange(n)[None, :], lo.shape)
        rays = np.broadcast_to(sel[:, None], lo.shape)
        for k, w in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
            ok = (k >= 0) & (k < n) & (w > 0)
            if driving_x:
                pix = k[ok] * n + drive_idx[ok]
            else:
                pix = drive_idx[ok] * n + k[ok]
            ray_ids.append(rays[ok])
            pix_ids.append(pix)
            vals.append((w * length[:, None])[ok])
    return np.concatenate(ray_ids), np.concatenate(pix_ids), np.concatenate(vals)


def _subray_offsets(subrays: int) -> np.ndarray:
    return (np.arange(subrays) + 0.5) / subrays - 0.5


@functools.lru_cache(maxsize=16)
def _system_matrices(geom: Geometry, subrays: int = 1):
    if subrays < 1:
        raise ConfigurationError("subrays must be >= 1")
    n = geom.image_size
    rows, cols, vals = [], [], []
    for v in range(geom.n_views):
        for off in _subray_offsets(subrays):
            pts, dirs = _rays(geom, v, off)
            r, p, w = _joseph_entries(pts, dirs, n, geom.pixel_spacing)
            rows.append(r + v * geom.n_bins)
            cols.append(p)
            vals.append(w / subrays)
    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_views * geom.n_bins, n * n),
    ).tocsr()
    a.sum_duplicates()
    return a, a.T.tocsr()


def system_matrix(geom: Geometry, subrays: int = 1) -> sp.csr_matrix:
    """Sparse forward-projection matrix (rays x pixels)."""
    return _system_matrices(geom, subrays)[0]


def forward_project(img, geom: Geometry, subrays: int = 1) -> np.ndarray:
    """Line integrals of ``img`` along every ray of ``geom``.

    ``subrays > 1`` averages several rays per detector bin, which models the
    finite bin width (used by the simulator for partial-volume blur).
    """
    img = _check_image(img, geom)
    a = _system_matrices(geom, subrays)[0]
    return (a @ img.ravel()).reshape(geom.sino_shape)


def back_project(sino, geom: Geometry, subrays: int = 1) -> np.ndarray:
    """Unfiltered back-projection, the exact adjoint of :func:`forward_project`."""
    sino = _check_sino(sino, geom)
    at = _system_matrices(geom, subrays)[1]
    return (at @ sino.ravel()).reshape(geom.image_shape)


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def ramlak_kernel(offsets, spacing: float) -> np.ndarray:
    """Band-limited ramp kernel sampled at integer ``offsets`` of ``spacing``."""
    k = np.asarray(offsets)
    h = np.zeros(k.shape, dtype=float)
    h[k == 0] = 1 / (4 * spacing**2)
    odd = (k % 2) == 1
    h[odd] = -1 / (math.pi**2 * k[odd].astype(float) ** 2 * spacing**2)
    return h


def _padded_length(n_bins: int) -> int:
    return 1 << int(math.ceil(math.log2(max(2 * n_bins, 2))))


@functools.lru_cache(maxsize=32)
def ramp_response(geom: Geometry, window: str | None = None) -> np.ndarray:
    """Real frequency response (``rfft`` layout) of the row filter.

    Fan beams use the equiangular kernel ``(g / sin g)^2 * h(g)``.  The DC
    term is zeroed exactly.
    """
    n_pad = _padded_length(geom.n_bins)
    k = np.rint(np.fft.fftfreq(n_pad) * n_pad).astype(np.int64)
    h = ramlak_kernel(k, geom.detector_spacing)
    if geom.beam == "fan":
        g = k * geom.detector_spacing
        nz = k != 0
        h[nz] *= (g[nz] / np.sin(g[nz])) ** 2
    resp = np.fft.rfft(h).real
    resp[0] = 0.0
    if window is not None:
        if window != "hann":
            raise ConfigurationError(f"unknown filter window {window!r}")
        f = np.arange(resp.size) / (resp.size - 1)
        resp = resp * 0.5 * (1 + np.cos(math.pi * f))
    resp.setflags(write=False)
    return resp


def ramp_filter(sino, geom: Geometry, window: str | None = None) -> np.ndarray:
    """Convolve each view row with the discrete ramp kernel.

    Rows are edge-padded to the next power of two >= 2 * n_bins, so constant
    rows map to zero.
    """
    sino = _check_sino(sino, geom)
    if geom.n_bins < 2:
        raise ContractError("ramp filtering needs at least 2 detector bins")
    n_pad = _padded_length(geom.n_bins)
    extra = n_pad - geom.n_bins
    left = extra // 2
    padded = np.pad(sino, ((0, 0), (left, extra - left)), mode="edge")
    spec = np.fft.rfft(padded, axis=1) * ramp_response(geom, window)[None, :]
    out = np.fft.irfft(spec, n=n_pad, axis=1)[:, left : left + geom.n_bins]
    return out * geom.detector_spacing


@functools.lru_cache(maxsize=16)
def _fbp_backprojector(geom: Geometry) -> sp.csr_matrix:
    n = geom.image_size
    c = (n - 1) / 2
    inside = np.nonzero(recon_mask(geom).ravel())[0]
    x = ((inside % n) - c) * geom.pixel_spacing
    y = (c - (inside // n)) * geom.pixel_spacing
    scale = geom.view_step * math.pi / (geom.angle_end - geom.angle_start)

    rows, cols, vals = [], [], []
    for v, angle in enumerate(geom.angles):
        ca, sa = math.cos(angle), math.sin(angle)
        if geom.beam == "parallel":
            pos = x * ca + y * sa
            weight = np.full(pos.shape, scale)
        else:
            vx = x - geom.source_to_center * ca
            vy = y - geom.source_to_center * sa
            # fan angle measured from the central ray (pointing at the origin)
            pos = np.arctan2(-ca * vy + sa * vx, -ca * vx - sa * vy)
            weight = scale / (vx**2 + vy**2)
        idx = pos / geom.detector_spacing + (geom.n_bins - 1) / 2
        lo = np.floor(idx)
        w_hi = idx - lo
        lo = lo.astype(np.int64)
        for k, w in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
            ok = (k >= 0) & (k < geom.n_bins) & (w > 0)
            rows.append(inside[ok])
            cols.append(v * geom.n_bins + k[ok])
            vals.append(w[ok] * weight[ok])
    b = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n, geom.n_views * geom.n_bins),
    ).tocsr()
    b.sum_duplicates()
    return b


@functools.lru_cache(maxsize=16)
def _fan_preweight(geom: Geometry) -> np.ndarray:
    return geom.source_to_center * np.cos(geom.bin_positions)


def fbp(sino, geom: Geometry, window: str | None = None) -> np.ndarray:
    """Filtered back-projection; pixels outside the reconstruction circle are 0."""
    sino = _check_sino(sino, geom)
    if geom.beam == "fan":
        sino = sino * _fan_preweight(geom)[None, :]
    q = ramp_filter(sino, geom, window)
    return (_fbp_backprojector(geom) @ q.ravel()).reshape(geom.image_shape)
