"""Image quality metrics over [0, 1] float images."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP_DB = 99.0

_GRAY = np.array([0.299, 0.587, 0.114])


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    for x in (a, b):
        if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
            raise ValueError("image values must lie in [0, 1]")
    return a, b


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) in dB, capped at 99 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _to_gray(a: np.ndarray) -> np.ndarray:
    if a.ndim == 3 and a.shape[-1] == 3:
        return a @ _GRAY
    if a.ndim == 2:
        return a
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {a.shape}")


def ssim(a, b, window: int = 8) -> float:
    """Mean SSIM over sliding uniform windows on the grayscale images.

    Standard stabilizers C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1.
    """
    a, b = _check_pair(a, b)
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    c1 = 0.01**2
    c2 = 0.03**2

    xw = np.lib.stride_tricks.sliding_window_view(x, (window, window))
    yw = np.lib.stride_tricks.sliding_window_view(y, (window, window))
    mx = xw.mean(axis=(-2, -1))
    my = yw.mean(axis=(-2, -1))
    vx = (xw**2).mean(axis=(-2, -1)) - mx**2
    vy = (yw**2).mean(axis=(-2, -1)) - my**2
    cov = (xw * yw).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))
