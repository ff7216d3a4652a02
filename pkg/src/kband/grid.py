"""K-space sampling geometry.

Band masks at arbitrary angles with constant area, variable-density masks,
the k-square / k-vertical baselines, angle coverage maps and the
loss-weighting mask that makes band-restricted gradients unbiased.

All masks are centred on pixel ``(rows // 2, cols // 2)``, the DC location of
:func:`kband.operators.fft2c`.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .errors import InvalidArgument

# distances closer than this are treated as the same boundary shell
_TIE_TOL = 1e-9


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridShape:
    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise InvalidArgument(f"grid dimensions must be integers, got {self.rows}x{self.cols}")
        if self.rows < 4 or self.cols < 4:
            raise InvalidArgument(f"grid must be at least 4x4, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        """Parse ``"64x64"``-style strings."""
        try:
            r, c = text.lower().split("x")
            return cls(int(r), int(c))
        except ValueError as exc:
            raise InvalidArgument(f"cannot parse grid shape {text!r}; expected ROWSxCOLS") from exc

    @property
    def center(self) -> tuple[int, int]:
        return self.rows // 2, self.cols // 2

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def tuple(self) -> tuple[int, int]:
        return self.rows, self.cols

    def __str__(self):
        return f"{self.rows}x{self.cols}"


def as_shape(shape) -> GridShape:
    if isinstance(shape, GridShape):
        return shape
    if isinstance(shape, str):
        return GridShape.parse(shape)
    rows, cols = shape
    return GridShape(int(rows), int(cols))


def kspace_offsets(shape) -> tuple[np.ndarray, np.ndarray]:
    """Integer (ky, kx) offsets of every pixel from the k-space centre."""
    shape = as_shape(shape)
    ky = np.arange(shape.rows) - shape.rows // 2
    kx = np.arange(shape.cols) - shape.cols // 2
    return np.meshgrid(ky, kx, indexing="ij")


@dataclass(frozen=True)
class BandMask:
    shape: GridShape
    angle_deg: Optional[int]
    half_width: float
    r_band: float
    bits: np.ndarray = field(repr=False)
    kind: str = "band"

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class VDMask:
    shape: GridShape
    r_vd_target: float
    calib: tuple[int, int]
    seed: int
    dimensionality: str
    bits: np.ndarray = field(repr=False)
    density_power: float = 2.0

    @property
    def fraction(self) -> float:
        return float(self.bits.sum()) / self.shape.size


@dataclass(frozen=True)
class CoverageMap:
    shape: GridShape
    counts: np.ndarray = field(repr=False)
    n_angles: int
    r_band: float


@dataclass(frozen=True)
class WeightMask:
    shape: GridShape
    weights: np.ndarray = field(repr=False)
    zero_coverage_flags: np.ndarray = field(repr=False)

    @property
    def n_zero_coverage(self) -> int:
        return int(self.zero_coverage_flags.sum())


def _check_band_args(shape: GridShape, angle_deg, r_band) -> int:
    if not r_band >= 1:
        raise InvalidArgument(f"r_band must be >= 1, got {r_band}")
    if int(angle_deg) != angle_deg or not 0 <= angle_deg < 180:
        raise InvalidArgument(f"angle_deg must be an integer in [0, 180), got {angle_deg}")
    target = int(round(shape.size / r_band))
    if target > shape.size:
        raise InvalidArgument("band target count exceeds the grid size")
    return max(target, 1)


def _direction(angle_deg: int) -> tuple[float, float]:
    a = math.radians(angle_deg)
    return math.sin(a), math.cos(a)


def _aliased_offsets(shape: GridShape, s: float, c: float):
    """Signed across-band and along-band offsets of every pixel.

    On even grids the ``-N/2`` Nyquist row/column also stands for ``+N/2``;
    those pixels take whichever alias lies closer to the band's centre line.
    """
    ky, kx = kspace_offsets(shape)
    ky_alt = np.where(ky == -(shape.rows // 2), ky + shape.rows, ky) if shape.rows % 2 == 0 else ky
    kx_alt = np.where(kx == -(shape.cols // 2), kx + shape.cols, kx) if shape.cols % 2 == 0 else kx
    best_signed = -s * kx + c * ky
    best_along = c * kx + s * ky
    for yy, xx in ((ky_alt, kx), (ky, kx_alt), (ky_alt, kx_alt)):
        signed = -s * xx + c * yy
        closer = np.abs(signed) < np.abs(best_signed) - _TIE_TOL
        best_signed = np.where(closer, signed, best_signed)
        best_along = np.where(closer, c * xx + s * yy, best_along)
    return best_signed, best_along


def _partner(shape: GridShape) -> np.ndarray:
    """Flat index of every pixel's point reflection through the centre (mod N)."""
    r = (2 * (shape.rows // 2) - np.arange(shape.rows)) % shape.rows
    c = (2 * (shape.cols // 2) - np.arange(shape.cols)) % shape.cols
    return (r[:, None] * shape.cols + c[None, :]).ravel()


@functools.lru_cache(maxsize=4096)
def _band_direct(rows: int, cols: int, angle_deg: int, r_band: float):
    shape = GridShape(rows, cols)
    target = _check_band_args(shape, angle_deg, r_band)
    s, c = _direction(angle_deg)
    signed, along = _aliased_offsets(shape, s, c)
    dist = np.abs(signed).ravel()
    width = float(np.sort(dist)[target - 1])
    bits = dist < width - _TIE_TOL
    need = target - int(bits.sum())
    # Partial boundary shell, filled with point-symmetric pairs closest to the
    # centre first. An odd remainder uses a self-symmetric pixel if the shell
    # has one, else overshoots by one pixel when that stays within 1% of the
    # target, else takes a single pixel (exact count, asymmetric).
    shell = np.flatnonzero(np.abs(dist - width) <= _TIE_TOL)
    partner = _partner(shape)
    rep = np.minimum(shell, partner[shell])
    t = np.abs(along.ravel()[shell])
    order = np.lexsort((rep, np.round(t, 9)))
    seen, half = set(), None
    for i in order:
        if need <= 0:
            break
        k = int(rep[i])
        if k in seen:
            continue
        pair = {int(shell[i]), int(partner[shell[i]])}
        if len(pair) <= need:
            seen.add(k)
            bits[list(pair)] = True
            need -= len(pair)
        elif half is None:
            half = pair
    if need == 1 and half is not None:
        if target >= 100:
            bits[list(half)] = True
        else:
            bits[min(half)] = True
    return width, _frozen(bits.reshape(shape.tuple).astype(np.uint8))


def rotate90_centered(bits: np.ndarray) -> np.ndarray:
    """Rotate a square mask by +90 degrees about its centre pixel.

    Offsets wrap modulo the grid size, so on even grids the unpaired
    ``-N/2`` row and column map onto themselves.
    """
    n = bits.shape[0]
    if bits.shape != (n, n):
        raise InvalidArgument("centred rotation needs a square grid")
    m = (2 * (n // 2) - np.arange(n)) % n
    return bits.T[m, :]


@functools.lru_cache(maxsize=4096)
def _band(rows: int, cols: int, angle_deg: int, r_band: float):
    if rows == cols and angle_deg >= 90:
        width, bits = _band(rows, cols, angle_deg - 90, r_band)
        return width, _frozen(rotate90_centered(bits))
    return _band_direct(rows, cols, angle_deg, r_band)


def band_width_for_angle(shape, angle_deg: int, r_band: float) -> float:
    """Smallest half-width whose slab through the centre holds the target pixel count."""
    shape = as_shape(shape)
    _check_band_args(shape, angle_deg, r_band)
    return _band(shape.rows, shape.cols, int(angle_deg), float(r_band))[0]


def band_mask(shape, angle_deg: int, r_band: float) -> BandMask:
    """Binary band through the k-space centre whose long axis lies ``angle_deg`` from kx.

    The band holds ``round(rows * cols / r_band)`` pixels (one more when the
    boundary shell cannot be split symmetrically): every pixel strictly inside
    the half-width plus point-symmetric pairs of boundary pixels, nearest the
    centre first, so the mask equals its own 180 degree rotation. On even grids
    the Nyquist row/column is measured at its nearer alias. On square grids
    the band at ``a + 90`` is the centred rotation of the band at ``a``.
    """
    shape = as_shape(shape)
    _check_band_args(shape, angle_deg, r_band)
    width, bits = _band(shape.rows, shape.cols, int(angle_deg), float(r_band))
    return BandMask(shape, int(angle_deg), width, float(r_band), bits)


def vertical_band_mask(shape, r_band: float) -> BandMask:
    bm = band_mask(shape, 90, r_band)
    return BandMask(bm.shape, 90, bm.half_width, bm.r_band, bm.bits, kind="vertical")


def square_mask(shape, r_band: float) -> BandMask:
    """Centred rectangle with the grid's aspect ratio and area ``rows * cols / r_band``."""
    shape = as_shape(shape)
    if not r_band >= 1:
        raise InvalidArgument(f"r_band must be >= 1, got {r_band}")
    target = shape.size / r_band
    aspect = shape.rows / shape.cols
    best = None
    # prefer the best aspect among sizes within 1% of the target area
    for h in range(1, shape.rows + 1):
        for w in {math.floor(target / h), math.ceil(target / h)}:
            w = min(max(w, 1), shape.cols)
            err = abs(h * w - target)
            key = (err > 0.01 * target, abs(math.log(h / w / aspect)), err)
            if best is None or key < best[0]:
                best = (key, h, w)
    _, h, w = best
    cr, cc = shape.center
    bits = np.zeros(shape.tuple, dtype=np.uint8)
    bits[cr - h // 2:cr - h // 2 + h, cc - w // 2:cc - w // 2 + w] = 1
    return BandMask(shape, None, h / 2.0, float(r_band), _frozen(bits), kind="square")


def full_mask(shape) -> BandMask:
    shape = as_shape(shape)
    bits = np.ones(shape.tuple, dtype=np.uint8)
    return BandMask(shape, None, math.inf, 1.0, _frozen(bits), kind="full")


def uniform_angles(n_angles: int) -> list[int]:
    """``n_angles`` integer degrees spread uniformly over [0, 180)."""
    if not 1 <= n_angles <= 180:
        raise InvalidArgument(f"n_angles must be in [1, 180], got {n_angles}")
    return [int(round(i * 180 / n_angles)) for i in range(n_angles)]


def coverage_map(shape, r_band: float, angles: Optional[Sequence[int]] = None) -> CoverageMap:
    shape = as_shape(shape)
    angles = list(range(180)) if angles is None else [int(a) for a in angles]
    if not angles:
        raise InvalidArgument("coverage needs at least one angle")
    counts = np.zeros(shape.tuple, dtype=np.int64)
    for a in angles:
        counts += band_mask(shape, a, r_band).bits
    return CoverageMap(shape, _frozen(counts), len(angles), float(r_band))


def weight_mask(coverage: CoverageMap) -> WeightMask:
    counts = coverage.counts
    zero = counts == 0
    weights = np.zeros(counts.shape, dtype=np.float64)
    weights[~zero] = coverage.n_angles / counts[~zero]
    return WeightMask(coverage.shape, _frozen(weights), _frozen(zero.astype(np.uint8)))


def kband_weight_mask(shape, r_band: float, angles: Optional[Sequence[int]] = None) -> WeightMask:
    return weight_mask(coverage_map(shape, r_band, angles))


# ---------------------------------------------------------------------------
# variable-density masks

def _calib_slices(shape: GridShape, calib):
    ch, cw = int(calib[0]), int(calib[1])
    if ch < 0 or cw < 0 or ch > shape.rows or cw > shape.cols:
        raise InvalidArgument(f"calibration region {ch}x{cw} does not fit in {shape}")
    cr, cc = shape.center
    return slice(cr - ch // 2, cr - ch // 2 + ch), slice(cc - cw // 2, cc - cw // 2 + cw)


def _normalized_radius(shape: GridShape) -> np.ndarray:
    ky, kx = kspace_offsets(shape)
    rho = np.hypot(ky / (shape.rows / 2), kx / (shape.cols / 2))
    return rho / rho.max()


VD_R_MIN = 0.5  # exclusion radius at the centre, below the pixel pitch


def _calibrate(sample, target: float, max_radius: float, iters: int = 40):
    """Bisect the outer exclusion radius until ``sample(r_max)`` hits ``target`` fraction."""
    best = None
    lo, hi = VD_R_MIN, 2.0
    while True:
        bits = sample(hi)
        frac = bits.mean()
        if best is None or abs(frac - target) < best[0]:
            best = (abs(frac - target), bits)
        if frac <= target or hi >= max_radius:
            break
        lo, hi = hi, min(2 * hi, max_radius)
    for _ in range(iters):
        if best[0] <= 0.005 * target:
            break
        mid = 0.5 * (lo + hi)
        bits = sample(mid)
        frac = bits.mean()
        if abs(frac - target) < best[0]:
            best = (abs(frac - target), bits)
        if frac > target:
            lo = mid
        else:
            hi = mid
    return best[1]


def _check_vd(r_vd):
    if not r_vd >= 1:
        raise InvalidArgument(f"r_vd must be >= 1, got {r_vd}")


def vd_mask_2d(shape, r_vd: float, calib=(0, 0), density_power: float = 2.0, seed: int = 0) -> VDMask:
    """Variable-density Poisson-disc mask over the full grid.

    The exclusion radius grows from ``VD_R_MIN`` at the centre to ``r_max`` at
    the corners as ``rho ** density_power``; ``r_max`` is bisected until the
    sampled fraction (calibration block included) matches ``1 / r_vd``.
    Wherever the radius stays below one pixel the grid is sampled fully.
    """
    shape = as_shape(shape)
    _check_vd(r_vd)
    rs, cs = _calib_slices(shape, calib)
    calib = (int(calib[0]), int(calib[1]))
    if r_vd == 1:
        bits = np.ones(shape.tuple, dtype=np.uint8)
        return VDMask(shape, float(r_vd), calib, int(seed), "2D", _frozen(bits), float(density_power))
    initial = np.zeros(shape.tuple, dtype=np.uint8)
    initial[rs, cs] = 1
    rho = _normalized_radius(shape) ** density_power
    order = np.random.default_rng(seed).permutation(shape.size)

    def sample(r_max):
        radius = VD_R_MIN + (r_max - VD_R_MIN) * rho
        return _backend.poisson_disc_2d(radius, order, initial)

    bits = _calibrate(sample, 1.0 / r_vd, max_radius=4.0 * max(shape.tuple))
    return VDMask(shape, float(r_vd), calib, int(seed), "2D", _frozen(bits), float(density_power))


def vd_mask_1d(shape, r_vd: float, calib_lines: int = 0, density_power: float = 2.0, seed: int = 0) -> VDMask:
    """Variable-density selection of full phase-encode columns along kx."""
    shape = as_shape(shape)
    _check_vd(r_vd)
    if not 0 <= calib_lines <= shape.cols:
        raise InvalidArgument(f"calib_lines={calib_lines} does not fit in {shape.cols} columns")
    calib = (shape.rows, int(calib_lines))
    if r_vd == 1:
        bits = np.ones(shape.tuple, dtype=np.uint8)
        return VDMask(shape, float(r_vd), calib, int(seed), "1D", _frozen(bits), float(density_power))
    cc = shape.cols // 2
    initial = np.zeros(shape.cols, dtype=np.uint8)
    initial[cc - calib_lines // 2:cc - calib_lines // 2 + calib_lines] = 1
    kx = np.abs(np.arange(shape.cols) - cc).astype(np.float64)
    rho = (kx / kx.max()) ** density_power
    order = np.random.default_rng(seed).permutation(shape.cols)

    def sample(r_max):
        return _backend.poisson_disc_1d(VD_R_MIN + (r_max - VD_R_MIN) * rho, order, initial)

    lines = _calibrate(sample, 1.0 / r_vd, max_radius=4.0 * shape.cols)
    bits = np.broadcast_to(lines[None, :], shape.tuple).astype(np.uint8)
    return VDMask(shape, float(r_vd), calib, int(seed), "1D", _frozen(bits), float(density_power))


def vd_mask_bernoulli(shape, r_vd: float, calib=(0, 0), density_power: float = 2.0, seed: int = 0) -> VDMask:
    """Independent-Bernoulli variable-density mask with density ``(1 - rho) ** density_power``.

    The density is scaled so the expected sampled fraction equals ``1 / r_vd``.
    """
    shape = as_shape(shape)
    _check_vd(r_vd)
    rs, cs = _calib_slices(shape, calib)
    calib = (int(calib[0]), int(calib[1]))
    in_calib = np.zeros(shape.tuple, dtype=bool)
    in_calib[rs, cs] = True
    base = (1.0 - _normalized_radius(shape)) ** density_power
    target = shape.size / r_vd

    def expected(scale):
        return np.where(in_calib, 1.0, np.minimum(1.0, scale * base)).sum()

    lo, hi = 0.0, 1.0
    while expected(hi) < target and hi < 1e12:
        hi *= 2
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if expected(mid) < target else (lo, mid)
    prob = np.where(in_calib, 1.0, np.minimum(1.0, hi * base))
    bits = (np.random.default_rng(seed).random(shape.tuple) < prob).astype(np.uint8)
    return VDMask(shape, float(r_vd), calib, int(seed), "2D", _frozen(bits), float(density_power))
