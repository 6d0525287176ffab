"""Image error metrics against a converged reference."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 99.0
RMSE_EPS = 1e-2


def _pair(image, reference):
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(image, reference, cap: float = PSNR_CAP) -> float:
    """``10 log10(peak^2 / MSE)`` with ``peak = max(max(reference), 1)``; capped at ``cap``."""
    x, y = _pair(image, reference)
    mse = float(np.mean((x - y) ** 2))
    peak = max(float(y.max()) if y.size else 0.0, 1.0)
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def rmse(image, reference, eps: float = RMSE_EPS) -> float:
    """Relative MSE: mean of ``(x - y)^2 / (y^2 + eps)`` over pixels and channels."""
    x, y = _pair(image, reference)
    return float(np.mean((x - y) ** 2 / (y * y + eps)))


def mean_luminance(image) -> float:
    img = np.asarray(image, dtype=np.float64)
    return float(np.mean(0.2126 * img[..., 0] + 0.7152 * img[..., 1] + 0.0722 * img[..., 2]))
