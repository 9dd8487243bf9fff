"""Analytic reconstruction, volume denoising and point-cloud initialization."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d, map_coordinates
from scipy.spatial import cKDTree

from .core import DenseVolume, GaussianCloud, ProjectionStack
from .errors import EmptyObjectError, InsufficientViewsError, InvalidParameterError

log = logging.getLogger(__name__)

WINDOWS = ("ram-lak", "hann")


class InitWarning(UserWarning):
    pass


# ----------------------------------------------------------------------------
# filtered backprojection
# ----------------------------------------------------------------------------


def ramp_filter_response(n, pitch, window="hann"):
    """Frequency response of the band-limited ramp on an ``n``-point FFT grid.

    Built as the FFT of the spatial Ram-Lak kernel, which avoids the DC
    offset of sampling ``|f|`` directly.
    """
    if window not in WINDOWS:
        raise InvalidParameterError(f"unknown filter window {window!r}")
    k = np.fft.fftfreq(n) * n  # signed integer offsets
    h = np.zeros(n)
    h[0] = 1.0 / (4.0 * pitch * pitch)
    odd = (np.abs(k) % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * pitch) ** 2
    resp = np.real(np.fft.fft(h)) * pitch
    if window == "hann":
        f = np.fft.fftfreq(n)  # cycles per sample, |f| <= 0.5
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return resp


def _filter_rows(images, pitch, window):
    ncols = images.shape[-1]
    n = 1 << int(math.ceil(math.log2(2 * ncols)))
    resp = ramp_filter_response(n, pitch, window)
    spec = np.fft.fft(images, n=n, axis=-1)
    return np.real(np.fft.ifft(spec * resp, axis=-1))[..., :ncols]


def fdk_reconstruct(stack: ProjectionStack, dims, spacing=None, origin=None,
                    window: str = "hann") -> DenseVolume:
    """FBP (parallel) or FDK (cone) reconstruction over a full circular scan."""
    geo = stack.geometry
    if geo.num_views < 2:
        raise InsufficientViewsError("analytic reconstruction needs at least 2 views")
    dims = tuple(int(d) for d in dims)
    spacing = 2.0 / np.array(dims, dtype=np.float64) if spacing is None else np.broadcast_to(
        np.asarray(spacing, dtype=np.float64), (3,)).copy()
    if origin is None:
        vol = DenseVolume.centered(np.zeros(dims), spacing)
    else:
        vol = DenseVolume(np.zeros(dims), spacing, np.asarray(origin, dtype=np.float64))
    pts = vol.voxel_centers().reshape(-1, 3)
    rows, cols, pitch = geo.detector_rows, geo.detector_cols, geo.pixel_pitch
    images = np.asarray(stack.images, dtype=np.float64)
    acc = np.zeros(pts.shape[0])
    seen = np.zeros(pts.shape[0], dtype=np.int64)

    def on_detector(cu, rv):
        return (cu >= 0) & (cu <= cols - 1) & (rv >= 0) & (rv <= rows - 1)

    if geo.mode == "parallel":
        filtered = _filter_rows(images, pitch, window)
        for i in range(geo.num_views):
            _, eu, ev = geo.frame(i)
            cu = (pts @ eu) / pitch + (cols - 1) / 2
            rv = (pts @ ev) / pitch + (rows - 1) / 2
            acc += map_coordinates(filtered[i], [rv, cu], order=1, mode="constant", cval=0.0)
            seen += on_detector(cu, rv)
    else:
        dso = geo.source_to_axis
        mag = geo.magnification
        vpitch = pitch / mag  # detector rescaled to the rotation axis
        u, v = geo.detector_coords()
        uu, vv = np.meshgrid(u / mag, v / mag)
        cosw = dso / np.sqrt(dso * dso + uu * uu + vv * vv)
        filtered = _filter_rows(images * cosw[None], vpitch, window)
        for i in range(geo.num_views):
            d, eu, ev = geo.frame(i)
            depth = dso + pts @ d
            scale = dso / depth
            cu = (pts @ eu) * scale / vpitch + (cols - 1) / 2
            rv = (pts @ ev) * scale / vpitch + (rows - 1) / 2
            val = map_coordinates(filtered[i], [rv, cu], order=1, mode="constant", cval=0.0)
            acc += val * scale * scale
            seen += on_detector(cu, rv)
    # 0.5 * integral over 2*pi, sampled with N views; voxels that leave the
    # detector in some view are truncated and set to zero
    data = np.where(seen == geo.num_views, np.maximum(acc * (np.pi / geo.num_views), 0.0), 0.0)
    data = data.reshape(dims)
    return vol.with_data(data)


# ----------------------------------------------------------------------------
# denoising
# ----------------------------------------------------------------------------


def default_radius(sigma_d):
    return int(math.ceil(3.0 * sigma_d))


def gaussian_taps(sigma_d, radius_r):
    j = np.arange(-radius_r, radius_r + 1, dtype=np.float64)
    return np.exp(-0.5 * (j / sigma_d) ** 2)


def gaussian_filter_volume(vol: DenseVolume, sigma_d: float, radius_r: int | None = None) -> DenseVolume:
    """Normalized separable Gaussian filter with zero padding.

    The weights are renormalized per voxel over in-bounds offsets only, so a
    constant volume stays constant up to the edges.
    """
    if not sigma_d > 0:
        raise InvalidParameterError("sigma_d must be positive")
    r = default_radius(sigma_d) if radius_r is None else int(radius_r)
    if r < 1:
        raise InvalidParameterError("radius_r must be >= 1")
    if r < default_radius(sigma_d):
        warnings.warn(f"filter radius {r} truncates the Gaussian (ceil(3 sigma) = "
                      f"{default_radius(sigma_d)})", InitWarning, stacklevel=2)
    taps = gaussian_taps(sigma_d, r)
    data = np.asarray(vol.data, dtype=np.float64)
    # separable box domain: the 3-D normalizer is the product of 1-D ones
    for axis in range(3):
        num = correlate1d(data, taps, axis=axis, mode="constant", cval=0.0)
        den = correlate1d(np.ones(data.shape[axis]), taps, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = -1
        data = num / den.reshape(shape)
    return vol.with_data(data)


# ----------------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class InitConfig:
    sigma_d: float = 3.0
    radius_r: int | None = None
    tau: float = 0.001
    num_points_m: int = 50_000
    seed: int = 0
    scale_multiplier: float = 1.0
    density_multiplier: float = 1.0
    window: str = field(default="hann")

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise InvalidParameterError("sigma_d must be positive")
        if self.radius_r is not None and int(self.radius_r) < 1:
            raise InvalidParameterError("radius_r must be >= 1")
        if not 0 <= self.tau < 1:
            raise InvalidParameterError("tau must lie in [0, 1)")
        if int(self.num_points_m) < 1:
            raise InvalidParameterError("num_points_m must be >= 1")
        if not self.scale_multiplier > 0 or not self.density_multiplier > 0:
            raise InvalidParameterError("multipliers must be positive")
        if self.window not in WINDOWS:
            raise InvalidParameterError(f"unknown filter window {self.window!r}")

    @property
    def radius(self):
        return default_radius(self.sigma_d) if self.radius_r is None else int(self.radius_r)


def query_trilinear(vol: DenseVolume, points):
    idx = (np.asarray(points, dtype=np.float64) - vol.origin) / vol.spacing
    return map_coordinates(np.asarray(vol.data, dtype=np.float64), idx.T, order=1,
                           mode="nearest", prefilter=False)


def nearest_neighbor_distance(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return np.full(pts.shape[0], np.inf)
    dist, _ = cKDTree(pts).query(pts, k=2)
    return dist[:, 1]


def init_point_cloud(denoised: DenseVolume, cfg: InitConfig, bbox=None) -> GaussianCloud:
    """Sample kernels from supra-threshold voxels of a denoised volume."""
    data = np.asarray(denoised.data)
    flat = np.flatnonzero(data.reshape(-1) > cfg.tau)
    if flat.size == 0:
        raise EmptyObjectError(f"no voxel exceeds the density threshold {cfg.tau}")
    m = int(cfg.num_points_m)
    rng = np.random.default_rng(cfg.seed)
    if flat.size <= m:
        if flat.size < m:
            warnings.warn(f"only {flat.size} voxels exceed tau; using all of them "
                          f"instead of {m}", InitWarning, stacklevel=2)
        chosen = flat
    else:
        chosen = np.sort(rng.choice(flat, size=m, replace=False))
    ijk = np.stack(np.unravel_index(chosen, data.shape), axis=1).astype(np.float64)
    jitter = rng.uniform(-0.5, 0.5, size=ijk.shape)
    pos = denoised.origin + (ijk + jitter) * denoised.spacing
    floor = 0.5 * float(np.min(denoised.spacing))
    nn = nearest_neighbor_distance(pos)
    nn = np.where(np.isfinite(nn), nn, floor)
    s = np.maximum(nn, floor) * cfg.scale_multiplier
    rho = query_trilinear(denoised, pos) * cfg.density_multiplier
    box = denoised.bbox() if bbox is None else np.asarray(bbox, dtype=np.float64)
    return GaussianCloud(rho=rho, position=pos, scale=np.repeat(s[:, None], 3, axis=1),
                         rotation=np.tile([1.0, 0.0, 0.0, 0.0], (pos.shape[0], 1)), bbox=box)
