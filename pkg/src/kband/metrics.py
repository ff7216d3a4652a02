"""Image-quality metrics on magnitude images: NMSE, PSNR and SSIM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgument

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricRow:
    nmse: float
    psnr: float
    ssim: float

    def as_dict(self):
        return asdict(self)


def _pair(recon, truth):
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise InvalidArgument(f"shape mismatch: {recon.shape} vs {truth.shape}")
    return recon, truth


def nmse(recon_mag, truth_mag) -> float:
    recon, truth = _pair(recon_mag, truth_mag)
    denom = np.sum(truth ** 2)
    if denom == 0:
        raise InvalidArgument("NMSE is undefined for an all-zero reference")
    return float(np.sum((recon - truth) ** 2) / denom)


def psnr(recon_mag, truth_mag, peak: str = "max_of_truth") -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``math.inf``."""
    recon, truth = _pair(recon_mag, truth_mag)
    if peak == "max_of_truth":
        p = float(truth.max())
    elif peak == "unit":
        p = 1.0
    else:
        raise InvalidArgument(f"unknown peak rule {peak!r}")
    mse = float(np.mean((recon - truth) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(p * p / mse)


def _blur(img):
    return gaussian_filter(img, SSIM_SIGMA, mode="reflect", radius=SSIM_RADIUS)


def ssim_map(recon_mag, truth_mag, data_range: Optional[float] = None) -> np.ndarray:
    recon, truth = _pair(recon_mag, truth_mag)
    if min(recon.shape) < 2 * SSIM_RADIUS + 1:
        raise InvalidArgument(f"SSIM needs images of at least {2 * SSIM_RADIUS + 1} pixels per side")
    L = float(truth.max() - truth.min()) if data_range is None else float(data_range)
    if L == 0:
        if np.array_equal(recon, truth):
            return np.ones_like(truth)
        L = float(max(recon.max(), truth.max()) - min(recon.min(), truth.min()))
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    mx, my = _blur(recon), _blur(truth)
    vx = _blur(recon * recon) - mx * mx
    vy = _blur(truth * truth) - my * my
    cxy = _blur(recon * truth) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(recon_mag, truth_mag, data_range: Optional[float] = None) -> float:
    """Mean Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, symmetric borders).

    ``data_range`` defaults to the truth's dynamic range; passing a fixed value
    makes the metric symmetric in its arguments.
    """
    return float(np.mean(ssim_map(recon_mag, truth_mag, data_range)))


def metric_row(recon, truth, peak: str = "max_of_truth") -> MetricRow:
    """All three metrics on the magnitudes of (possibly complex) images."""
    r, t = np.abs(recon), np.abs(truth)
    return MetricRow(nmse(r, t), psnr(r, t, peak), ssim(r, t))


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation over slices."""
    arr = np.asarray(list(values), dtype=np.float64)
    return float(arr.mean()), float(arr.std())
