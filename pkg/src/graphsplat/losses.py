"""Projection and volume losses with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import GaussianCloud, KernelGraph
from .errors import InvalidParameterError
from .graph import laplacian_energy

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
TV_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.25
    lambda_tv: float = 0.05
    lambda_lap: float = 8e-4
    tv_crop_d: int = 32

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_tv", "lambda_lap"):
            if not getattr(self, name) >= 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if int(self.tv_crop_d) < 2:
            raise InvalidParameterError("tv_crop_d must be >= 2")


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(rendered, measured):
    r, m = _same_shape(rendered, measured)
    diff = r - m
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ----------------------------------------------------------------------------
# SSIM
# ----------------------------------------------------------------------------


def ssim_taps():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _blur(img):
    """Gaussian window sum with zero padding; the operator is self-adjoint."""
    g = ssim_taps()
    out = correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def _ssim_parts(x, y, data_range):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return mx, my, a1, a2, b1, b2


def _check_ssim_input(x, y):
    x, y = _same_shape(x, y)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise InvalidParameterError(f"SSIM needs 2-D images with both sides >= {SSIM_WINDOW}")
    return x, y


def ssim_map(x, y, data_range):
    x, y = _check_ssim_input(x, y)
    _, _, a1, a2, b1, b2 = _ssim_parts(x, y, data_range)
    return a1 * a2 / (b1 * b2)


def ssim(x, y, data_range):
    return float(np.mean(ssim_map(x, y, data_range)))


def dssim_loss(rendered, measured, data_range=None):
    """``(1 - mean SSIM) / 2`` and its gradient w.r.t. ``rendered``.

    ``data_range`` defaults to the maximum of ``measured``; training passes
    the maximum over the whole measured stack instead.
    """
    x, y = _check_ssim_input(rendered, measured)
    if data_range is None:
        data_range = float(y.max())
    if not data_range > 0:
        raise InvalidParameterError("SSIM data range must be positive")
    mx, my, a1, a2, b1, b2 = _ssim_parts(x, y, data_range)
    s = a1 * a2 / (b1 * b2)
    loss = 0.5 * (1.0 - float(np.mean(s)))
    g = -0.5 / s.size
    # partials of s w.r.t. blur(x), blur(x*x), blur(x*y)
    d_mx = g * s * (2 * my / a1 - 2 * mx / b1 - 2 * my / a2 + 2 * mx / b2)
    d_xx = g * s * (-1.0 / b2)
    d_xy = g * s * (2.0 / a2)
    grad = _blur(d_mx) + 2 * x * _blur(d_xx) + y * _blur(d_xy)
    return loss, grad


# ----------------------------------------------------------------------------
# total variation
# ----------------------------------------------------------------------------


def tv_loss(crop):
    """Isotropic TV averaged over voxels that have all three forward neighbours.

    Accepts a :class:`DenseVolume` or a bare 3-D array.
    """
    v = np.asarray(getattr(crop, "data", crop), dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise InvalidParameterError("TV needs a 3-D volume with every dim >= 2")
    base = v[:-1, :-1, :-1]
    dx = v[1:, :-1, :-1] - base
    dy = v[:-1, 1:, :-1] - base
    dz = v[:-1, :-1, 1:] - base
    mag = np.sqrt(dx * dx + dy * dy + dz * dz + TV_EPS * TV_EPS)
    n = mag.size
    gx, gy, gz = dx / mag / n, dy / mag / n, dz / mag / n
    grad = np.zeros_like(v)
    grad[:-1, :-1, :-1] -= gx + gy + gz
    grad[1:, :-1, :-1] += gx
    grad[:-1, 1:, :-1] += gy
    grad[:-1, :-1, 1:] += gz
    return float(mag.mean()), grad


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------


@dataclass
class LossGradients:
    """Gradient bundle: image-path, voxel-path and direct density gradients."""

    d_image: np.ndarray
    d_voxels: np.ndarray | None
    d_rho_direct: np.ndarray | None


@dataclass
class LossTerms:
    l1: float
    dssim: float
    tv: float
    lap: float
    total: float


def total_loss(rendered, measured, tv_crop, cloud: GaussianCloud | None,
               graph: KernelGraph | None, weights: LossWeights, data_range=None):
    """``L1 + l_ssim D-SSIM + l_lap L_lap + l_tv TV``; returns ``(LossTerms, LossGradients)``.

    Terms with a zero weight are neither evaluated nor differentiated. Pass
    ``tv_crop=None`` or ``graph=None`` to drop those terms.
    """
    l1, d_img = l1_loss(rendered, measured)
    dssim = tv = lap = 0.0
    if weights.lambda_ssim > 0:
        dssim, g = dssim_loss(rendered, measured, data_range)
        d_img = d_img + weights.lambda_ssim * g
    d_vox = None
    if weights.lambda_tv > 0 and tv_crop is not None:
        tv, g = tv_loss(tv_crop)
        d_vox = weights.lambda_tv * g
    d_rho = None
    if weights.lambda_lap > 0 and graph is not None and cloud is not None and len(cloud):
        lap, g = laplacian_energy(cloud, graph)
        d_rho = weights.lambda_lap * g
    total = (l1 + weights.lambda_ssim * dssim + weights.lambda_lap * lap
             + weights.lambda_tv * tv)
    return LossTerms(l1, dssim, tv, lap, total), LossGradients(d_img, d_vox, d_rho)
