"""Volume quality metrics: PSNR, windowed SSIM for 3D, MAE.

All three assume inputs normalized to data range 1 (volumes live in
[0,1]). SSIM uses a uniform 7^3 sliding window with the standard
constants C1 = (0.01)^2, C2 = (0.03)^2 and averages the per-window index
over all valid positions.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 100.0


def _pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) for data range 1, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def ssim3d(a, b, window: int = 7, c1: float = 1e-4, c2: float = 9e-4) -> float:
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"ssim3d expects 3-D volumes, got rank {a.ndim}")
    if min(a.shape) < window:
        raise ShapeError(f"volume {a.shape} smaller than window {window}")
    wa = np.lib.stride_tricks.sliding_window_view(a, (window,) * 3)
    wb = np.lib.stride_tricks.sliding_window_view(b, (window,) * 3)
    axes = (-3, -2, -1)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    var_a = wa.var(axis=axes)
    var_b = wb.var(axis=axes)
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def metric_report(a, b) -> dict:
    return {"psnr_db": psnr(a, b), "ssim": ssim3d(a, b), "mae": mae(a, b)}
