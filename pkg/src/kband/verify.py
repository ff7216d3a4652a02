"""Numerical checks of SGD over k-space subsets on tiny, fully enumerable instances.

Every expectation over band angles is computed exactly as a mean over the
finite angle set ``uniform_angles(n_angles)``, so unbiasedness becomes an
equality up to floating-point accumulation instead of a statistical test.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import grid
from .data import PhantomSpec, make_phantom, normalize_slice
from .errors import DegenerateInstance, InvalidArgument
from .grid import as_shape
from .operators import fft2c

DEFAULT_ARCH = ad.Architecture(n_layers=2, channels=4)
DEFAULT_UNROLL = ad.UnrollConfig(n_unrolls=1)


@dataclass
class UnbiasednessReport:
    setting: str
    n_masks: int
    relative_error: float
    mean_stochastic_grad: np.ndarray = field(repr=False)
    full_grad: np.ndarray = field(repr=False)
    weighted: bool = True
    zero_coverage: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["mean_stochastic_grad"] = self.mean_stochastic_grad.tolist()
        d["full_grad"] = self.full_grad.tolist()
        return d


@dataclass
class VarianceReport:
    empirical_second_moment: float
    bound_value: float
    C: float
    D: float
    M: float
    satisfied: bool
    loss_kind: str
    diagonal_term: float  # sum_j W_j ||grad l(z_j)||^2, the cross-term-free value

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EquivalenceReport:
    lhs: float
    rhs: float
    abs_difference: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class VarianceComparison:
    var_l1: float
    var_l2: float
    ratio: Optional[float]
    n_masks: int
    max_residual: float

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# instances

@dataclass(frozen=True)
class Instance:
    image: np.ndarray
    target: np.ndarray  # F x
    vd_bits: np.ndarray
    params: ad.ModelParams


def make_instance(shape, arch: ad.Architecture, seed: int, r_vd: float = 2.0,
                  noise_scale: Optional[float] = None) -> Instance:
    """Phantom (or, with ``noise_scale``, complex white noise) plus a VD mask and
    He-initialised parameters, all derived from ``seed``."""
    shape = as_shape(shape)
    if noise_scale is None:
        img, _ = normalize_slice(make_phantom(PhantomSpec(shape, n_ellipses=4, seed=seed)))
    else:
        rng = np.random.default_rng([seed, 7])
        img = noise_scale * (rng.normal(size=shape.tuple) + 1j * rng.normal(size=shape.tuple)) / math.sqrt(2)
    calib = (max(shape.rows // 4, 2), max(shape.cols // 4, 2))
    vd = grid.vd_mask_2d(shape, r_vd, calib, 2.0, seed)
    return Instance(img, fft2c(img), vd.bits, ad.init_params(arch, seed))


def _pred_node(theta, inst: Instance, arch, ucfg, input_mask):
    y = np.where(input_mask != 0, inst.target, 0)
    return ad.fft2c_node(ad.unrolled_node(theta, arch, y, input_mask, ucfg))


def _angle_masks(shape, n_angles, r_band):
    angles = grid.uniform_angles(n_angles)
    return angles, [grid.band_mask(shape, a, r_band).bits for a in angles]


def _grad(loss, theta):
    return ad.backward(loss, theta)


def _relative(a, b) -> float:
    nb = np.linalg.norm(b)
    if nb == 0:
        raise DegenerateInstance("full-grid gradient is zero; choose another seed")
    return float(np.linalg.norm(a - b) / nb)


# ---------------------------------------------------------------------------
# checks

def check_unbiasedness_independent(shape=(16, 16), n_angles: int = 12, r_band: float = 3,
                                   arch: ad.Architecture = DEFAULT_ARCH, unroll_cfg: ad.UnrollConfig = DEFAULT_UNROLL,
                                   seed: int = 0, weighted: bool = True) -> UnbiasednessReport:
    """Mean of weighted per-angle l2 gradients against the full-grid l2 gradient.

    The network input ``y = V F x`` does not depend on the band, so the
    expectation over angles is exact.
    """
    shape = as_shape(shape)
    inst = make_instance(shape, arch, seed)
    angles, masks = _angle_masks(shape, n_angles, r_band)
    wm = grid.kband_weight_mask(shape, r_band, angles)
    w = wm.weights if weighted else None
    theta = ad.constant(inst.params.values)
    pred = _pred_node(theta, inst, arch, unroll_cfg, inst.vd_bits)
    full = _grad(ad.kspace_loss(pred, inst.target, np.ones(shape.tuple), None, "l2"), theta)
    total = np.zeros_like(full)
    for b in masks:
        total = total + _grad(ad.kspace_loss(pred, inst.target, b, w, "l2"), theta)
    mean = total / len(masks)
    return UnbiasednessReport("independent_mask", len(masks), _relative(mean, full), mean, full,
                              weighted, wm.n_zero_coverage)


def check_unbiasedness_kband(shape=(16, 16), n_angles: int = 12, r_band: float = 3, r_vd: float = 2.0,
                             arch: ad.Architecture = DEFAULT_ARCH, unroll_cfg: ad.UnrollConfig = DEFAULT_UNROLL,
                             seed: int = 0) -> UnbiasednessReport:
    """Residual bias when the band also shapes the input, ``y_i = (B_i and V) F x``.

    The reference is the mean over angles of full-grid gradients at the same
    inputs; this measures the coupling, no exactness is expected.
    """
    shape = as_shape(shape)
    inst = make_instance(shape, arch, seed, r_vd)
    angles, masks = _angle_masks(shape, n_angles, r_band)
    wm = grid.kband_weight_mask(shape, r_band, angles)
    ones = np.ones(shape.tuple)
    stoch = ref = None
    for b in masks:
        theta = ad.constant(inst.params.values)
        pred = _pred_node(theta, inst, arch, unroll_cfg, (b & inst.vd_bits).astype(np.uint8))
        g = _grad(ad.kspace_loss(pred, inst.target, b, wm.weights, "l2"), theta)
        f = _grad(ad.kspace_loss(pred, inst.target, ones, None, "l2"), theta)
        stoch = g if stoch is None else stoch + g
        ref = f if ref is None else ref + f
    stoch, ref = stoch / len(masks), ref / len(masks)
    return UnbiasednessReport("kband_coupled", len(masks), _relative(stoch, ref), stoch, ref,
                              True, wm.n_zero_coverage)


def jacobian_sq_norm(pred: ad.Var, theta: ad.Var) -> float:
    """``||d (Re, Im) pred / d theta||_F^2`` by one reverse pass per output coordinate."""
    n = pred.value.size
    total = 0.0
    for j in range(n):
        for unit in (1.0, 1j):
            seed = np.zeros(pred.value.shape, dtype=complex)
            seed.flat[j] = unit
            g = ad.backward(pred, theta, seed)
            total += float(g @ g)
    return total


def _stochastic_grads(pred, theta, target, masks, weights, kind):
    return [_grad(ad.kspace_loss(pred, target, b, weights, kind), theta) for b in masks]


def check_variance_bound(shape=(16, 16), n_angles: int = 12, r_band: float = 3,
                         arch: ad.Architecture = DEFAULT_ARCH, unroll_cfg: ad.UnrollConfig = DEFAULT_UNROLL,
                         loss_kind: str = "l1", seed: int = 0, zero_residual: bool = False,
                         noise_scale: Optional[float] = None) -> VarianceReport:
    """Exact ``E||G||^2`` over the angle set against ``C D^2 M``.

    ``C`` is the largest weight, ``D`` the loss Lipschitz constant (1 for l1,
    ``2 max|z|`` for l2) and ``M`` the squared Frobenius norm of the parameter
    Jacobian of ``F f_theta(y)``.
    """
    if loss_kind not in ("l1", "l2"):
        raise InvalidArgument(f"unknown loss kind {loss_kind!r}")
    shape = as_shape(shape)
    inst = make_instance(shape, arch, seed, noise_scale=noise_scale)
    angles, masks = _angle_masks(shape, n_angles, r_band)
    wm = grid.kband_weight_mask(shape, r_band, angles)
    theta = ad.constant(inst.params.values)
    pred = _pred_node(theta, inst, arch, unroll_cfg, inst.vd_bits)
    target = pred.value.copy() if zero_residual else inst.target
    grads = _stochastic_grads(pred, theta, target, masks, wm.weights, loss_kind)
    second = float(np.mean([g @ g for g in grads]))
    covered = wm.weights[wm.weights > 0]
    C = float(covered.max())
    resid = np.abs(pred.value - target)
    D = 1.0 if loss_kind == "l1" else 2.0 * float(resid.max())
    M = jacobian_sq_norm(pred, theta)
    diag = 0.0
    ones = np.ones(shape.tuple)
    for j in range(shape.size):
        pix = np.zeros(shape.tuple)
        pix.flat[j] = 1.0
        if wm.weights.flat[j] == 0:
            continue
        g = _grad(ad.kspace_loss(pred, target, pix, ones, loss_kind), theta)
        diag += float(wm.weights.flat[j] * (g @ g))
    bound = C * D * D * M
    return VarianceReport(second, bound, C, D, M, bool(second <= bound * (1 + 1e-9)), loss_kind, diag)


def check_parseval(shape=(32, 32), seed: int = 0, scale: float = 1.0, same: bool = False) -> EquivalenceReport:
    rng = np.random.default_rng(seed)
    shape = as_shape(shape)
    a = scale * (rng.normal(size=shape.tuple) + 1j * rng.normal(size=shape.tuple))
    b = a.copy() if same else scale * (rng.normal(size=shape.tuple) + 1j * rng.normal(size=shape.tuple))
    lhs = float(np.sum(np.abs(fft2c(a) - fft2c(b)) ** 2))
    rhs = float(np.sum(np.abs(a - b) ** 2))
    return EquivalenceReport(lhs, rhs, abs(lhs - rhs))


def compare_gradient_variance(shape=(16, 16), n_angles: int = 12, r_band: float = 3,
                              arch: ad.Architecture = DEFAULT_ARCH, seed: int = 0,
                              unroll_cfg: ad.UnrollConfig = DEFAULT_UNROLL, noise_scale: float = 10.0,
                              zero_residual: bool = False) -> VarianceComparison:
    """Spread ``mean_i ||G_i - mean G||^2`` of weighted per-angle gradients for l1 and l2.

    The default target is complex white noise of standard deviation
    ``noise_scale``, giving residual moduli well above one.
    """
    shape = as_shape(shape)
    inst = make_instance(shape, arch, seed, noise_scale=noise_scale)
    angles, masks = _angle_masks(shape, n_angles, r_band)
    wm = grid.kband_weight_mask(shape, r_band, angles)
    theta = ad.constant(inst.params.values)
    pred = _pred_node(theta, inst, arch, unroll_cfg, inst.vd_bits)
    target = pred.value.copy() if zero_residual else inst.target
    out = {}
    for kind in ("l1", "l2"):
        g = np.array(_stochastic_grads(pred, theta, target, masks, wm.weights, kind))
        out[kind] = float(np.mean(np.sum((g - g.mean(axis=0)) ** 2, axis=1)))
    ratio = out["l2"] / out["l1"] if out["l1"] > 0 else None
    return VarianceComparison(out["l1"], out["l2"], ratio, len(masks),
                              float(np.abs(pred.value - target).max()))
