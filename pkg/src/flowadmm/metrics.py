"""Image quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError
from .tensor import mse as _mse

PSNR_CAP = 99.0


def psnr(x, ref, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` (also for mse = 0)."""
    err = _mse(x, ref)
    if err == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / err), PSNR_CAP))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_2d(x, ref, peak, window):
    def filt(a):
        return convolve2d(a, window, mode="valid")

    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(ref * ref) - mu_y * mu_y
    sxy = filt(x * ref) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x, ref, peak=1.0, win_size=11, sigma=1.5):
    """Mean structural similarity over fully-contained 11x11 Gaussian windows.

    ``(C, H, W)`` inputs are averaged over channels.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {x.shape}")
    if min(x.shape[-2:]) < win_size:
        raise ShapeError(f"image {x.shape[-2:]} is smaller than the {win_size}x{win_size} window")
    window = _gaussian_window(win_size, sigma)
    return float(np.mean([_ssim_2d(a, b, peak, window) for a, b in zip(x, ref)]))
