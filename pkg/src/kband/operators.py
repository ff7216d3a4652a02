"""MRI measurement model: centred unitary FFTs, masked forward/adjoint operators
and the data-consistency solve ``(A^H A + eta I) x = A^H y + eta z``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConvergenceError, InvalidArgument, SingularSystemError

AXES = (-2, -1)


@dataclass(frozen=True)
class DCConfig:
    eta: float = 1.0
    cg_max_iters: int = 200
    cg_tolerance: float = 1e-10

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgument(f"eta must be >= 0, got {self.eta}")
        if self.cg_tolerance <= 0:
            raise InvalidArgument("cg_tolerance must be positive")
        if self.cg_max_iters < 1:
            raise InvalidArgument("cg_max_iters must be positive")


def fft2c(x):
    """Centred, orthonormal 2-D DFT over the last two axes."""
    x = np.asarray(x)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=AXES), norm="ortho"), axes=AXES)


def ifft2c(k):
    k = np.asarray(k)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=AXES), norm="ortho"), axes=AXES)


def normalize_maps(maps):
    """Scale coil maps so that ``sum_i |S_i|^2 <= 1`` at every pixel."""
    maps = np.asarray(maps)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / np.maximum(rss, 1.0)


def _check(x, mask, maps):
    mask = np.asarray(mask)
    if x.shape[-2:] != mask.shape:
        raise InvalidArgument(f"shape mismatch: data {x.shape[-2:]} vs mask {mask.shape}")
    if maps is not None and np.shape(maps)[-2:] != mask.shape:
        raise InvalidArgument(f"shape mismatch: coil maps {np.shape(maps)[-2:]} vs mask {mask.shape}")
    return mask


def forward_op(x, mask, maps=None):
    """``mask * F(x)``, or per coil ``mask * F(S_i x)`` when maps are given."""
    x = np.asarray(x)
    mask = _check(x, mask, maps)
    if maps is None:
        return mask * fft2c(x)
    return mask * fft2c(np.asarray(maps) * x)


def adjoint_op(y, mask, maps=None):
    y = np.asarray(y)
    mask = _check(y, mask, maps)
    if maps is None:
        return ifft2c(mask * y)
    maps = np.asarray(maps)
    if y.shape != maps.shape:
        raise InvalidArgument(f"shape mismatch: k-space {y.shape} vs coil maps {maps.shape}")
    return np.sum(np.conj(maps) * ifft2c(mask * y), axis=0)


def normal_op(x, mask, eta, maps=None):
    """``(A^H A + eta I) x``."""
    return adjoint_op(forward_op(x, mask, maps), mask, maps) + eta * x


def conjugate_gradient(apply, b, x0=None, max_iters=200, tol=1e-10):
    """Solve ``apply(x) = b`` for Hermitian positive-definite ``apply``.

    Returns ``(x, relative_residual, iterations)``; stops when
    ``||b - apply(x)|| <= tol * ||b||``.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), 0.0, 0
    p = r.copy()
    rs = np.vdot(r, r).real
    rel = np.sqrt(rs) / bnorm
    it = 0
    while rel > tol and it < max_iters:
        ap = apply(p)
        alpha = rs / np.vdot(p, ap).real
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.vdot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
        rel = np.sqrt(rs) / bnorm
        it += 1
    return x, rel, it


def dc_solve(y, z, mask, cfg: DCConfig, maps=None, method: str = "auto"):
    """Data-consistency solve ``(A^H A + eta I)^{-1} (A^H y + eta z)``.

    ``method="auto"`` uses the exact diagonal closed form for single-coil data
    and conjugate gradient otherwise; ``"cg"`` forces the iterative path.
    """
    z = np.asarray(z)
    mask = _check(z, mask, maps)
    y = np.asarray(y)
    eta = cfg.eta
    full = bool(np.all(mask))
    if eta == 0 and not full:
        raise SingularSystemError("eta = 0 with an undersampling mask makes the normal operator singular")
    if method not in ("auto", "closed", "cg"):
        raise InvalidArgument(f"unknown dc method {method!r}")
    if maps is None and method != "cg":
        k = (mask * y + eta * fft2c(z)) / (mask + eta)
        return ifft2c(k)
    if method == "closed":
        raise InvalidArgument("closed-form dc_solve is single-coil only")
    b = adjoint_op(y, mask, maps) + eta * z
    x, rel, _ = conjugate_gradient(lambda v: normal_op(v, mask, eta, maps), b,
                                   max_iters=cfg.cg_max_iters, tol=cfg.cg_tolerance)
    if rel > cfg.cg_tolerance:
        raise ConvergenceError("conjugate gradient did not converge", rel)
    return x


def normal_residual(x, y, z, mask, eta, maps=None) -> float:
    """Relative residual of ``x`` in the data-consistency normal equations."""
    b = adjoint_op(y, mask, maps) + eta * np.asarray(z)
    r = normal_op(x, mask, eta, maps) - b
    return float(np.linalg.norm(r) / max(np.linalg.norm(b), np.finfo(float).tiny))
