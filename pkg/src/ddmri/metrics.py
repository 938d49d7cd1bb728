"""Reconstruction quality metrics over magnitude images.

Both metrics normalise by the ground-truth peak magnitude, so a [0,1] phantom
compares at peak 1.0. PSNR returns +inf on exact equality; SSIM uses the
standard 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, L=1) averaged
over valid (fully interior) positions.
"""

from __future__ import annotations

import numpy as np

from .engine import ShapeError
from .mri import magnitude

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _normalized_magnitudes(x: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape != ref.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {ref.shape}")
    mx, mr = magnitude(x), magnitude(ref)
    peak = mr.max()
    if peak > 0:
        mx, mr = mx / peak, mr / peak
    return mx, mr


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """10*log10(1/MSE) in dB at peak 1.0; +inf iff the magnitudes agree exactly."""
    mx, mr = _normalized_magnitudes(x, ref)
    mse = float(np.mean((mx - mr) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size) - half
    g1 = np.exp(-(coords**2) / (2 * sigma**2))
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


_KERNEL = _gaussian_kernel()


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean local SSIM over valid window positions; 1.0 iff identical."""
    mx, mr = _normalized_magnitudes(x, ref)
    h, w = mx.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = _local_mean(mx, _KERNEL)
    mu_y = _local_mean(mr, _KERNEL)
    var_x = _local_mean(mx * mx, _KERNEL) - mu_x**2
    var_y = _local_mean(mr * mr, _KERNEL) - mu_y**2
    cov = _local_mean(mx * mr, _KERNEL) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
