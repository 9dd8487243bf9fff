"""Volume quality metrics."""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidParameterError
from .losses import SSIM_WINDOW, ssim

PSNR_IDENTICAL = math.inf


def _pair(a, b):
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidParameterError(f"volume dims differ: {x.shape} vs {y.shape}")
    return x, y


def psnr_3d(reconstructed, reference) -> float:
    """``10 log10(peak^2 / MSE)`` with the reference maximum as peak.

    Identical volumes give ``inf``.
    """
    x, y = _pair(reconstructed, reference)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    peak = float(y.max())
    if peak <= 0:
        raise InvalidParameterError("reference peak must be positive")
    return 10.0 * math.log10(peak * peak / mse)


def ssim_slices(reconstructed, reference, axes=(2,)) -> float:
    """Mean 2-D SSIM over slices normal to each axis in ``axes`` (z by default)."""
    x, y = _pair(reconstructed, reference)
    if x.ndim != 3:
        raise InvalidParameterError("ssim_slices expects 3-D volumes")
    peak = float(y.max())
    if peak <= 0:
        raise InvalidParameterError("reference peak must be positive")
    vals = []
    for ax in axes:
        xs = np.moveaxis(x, ax, 0)
        ys = np.moveaxis(y, ax, 0)
        if min(xs.shape[1:]) < SSIM_WINDOW:
            raise InvalidParameterError(f"slices must be at least {SSIM_WINDOW} on a side")
        vals.extend(ssim(a, b, peak) for a, b in zip(xs, ys))
    return float(np.mean(vals))
