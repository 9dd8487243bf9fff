"""Ground-truth phantoms and simulated measurements.

The projector here is a fixed-step trilinear ray marcher over the voxel grid.
It never touches the Gaussian renderer, so simulated data is an independent
check of the reconstruction.

Phantoms live in normalized world coordinates: the grid spans [-1, 1] along
every axis.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import backend
from .core import DenseVolume, ProjectionStack, ScanGeometry, uniform_angles
from .errors import InvalidParameterError

log = logging.getLogger(__name__)

PHANTOM_KINDS = ("shepp-logan-3d", "gaussian-blobs", "cube-lattice", "ball")

# (intensity, semi-axes a b c, center x y z, rotation about z in degrees)
SHEPP_LOGAN_3D = (
    (1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0),
    (-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0),
    (-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0),
    (-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0),
    (0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0),
    (0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0),
    (0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0),
)


class SimulationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    dims: tuple = (64, 64, 64)
    seed: int = 0
    blob_count: int = 5
    ball_radius: float = 0.5

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise InvalidParameterError(f"unknown phantom kind {self.kind!r}; "
                                        f"expected one of {PHANTOM_KINDS}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 8:
            raise InvalidParameterError("phantom dims must be 3 values >= 8")
        object.__setattr__(self, "dims", dims)


@dataclass(frozen=True)
class NoiseSpec:
    photon_count_i0: float = 1e5
    electronic_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.photon_count_i0 > 0:
            raise InvalidParameterError("photon_count_i0 must be positive")
        if not self.electronic_sigma >= 0:
            raise InvalidParameterError("electronic_sigma must be >= 0")


def normalized_grid(dims):
    """Voxel-center coordinates in [-1, 1], each of shape ``dims``."""
    axes = [(np.arange(n) - (n - 1) / 2) / (n / 2) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _shepp_logan(dims):
    x, y, z = normalized_grid(dims)
    vol = np.zeros(dims)
    for amp, a, b, c, x0, y0, z0, phi in SHEPP_LOGAN_3D:
        t = np.deg2rad(phi)
        dx, dy, dz = x - x0, y - y0, z - z0
        xr = np.cos(t) * dx + np.sin(t) * dy
        yr = -np.sin(t) * dx + np.cos(t) * dy
        inside = (xr / a) ** 2 + (yr / b) ** 2 + (dz / c) ** 2 <= 1.0
        vol[inside] += amp
    return np.clip(vol, 0.0, 1.0)


def _blobs(dims, seed, count):
    rng = np.random.default_rng(seed)
    x, y, z = normalized_grid(dims)
    vol = np.zeros(dims)
    for _ in range(count):
        c = rng.uniform(-0.5, 0.5, 3)
        s = rng.uniform(0.08, 0.2)
        amp = rng.uniform(0.5, 1.0)
        vol += amp * np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * s * s))
    peak = vol.max()
    return vol / peak if peak > 1.0 else vol


def _cube_lattice(dims):
    """2x2x2 lattice of unit cubes centered at +-1/2 of the half extent."""
    vol = np.zeros(dims)
    sides = [max(1, n // 8) for n in dims]
    starts = [[n // 4 - s // 2, (3 * n) // 4 - s // 2] for n, s in zip(dims, sides)]
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                vol[sx:sx + sides[0], sy:sy + sides[1], sz:sz + sides[2]] = 1.0
    return vol


def _ball(dims, radius):
    x, y, z = normalized_grid(dims)
    return (x * x + y * y + z * z <= radius * radius).astype(np.float64)


def make_phantom(spec: PhantomSpec) -> DenseVolume:
    if spec.kind == "shepp-logan-3d":
        data = _shepp_logan(spec.dims)
    elif spec.kind == "gaussian-blobs":
        data = _blobs(spec.dims, spec.seed, spec.blob_count)
    elif spec.kind == "cube-lattice":
        data = _cube_lattice(spec.dims)
    else:
        data = _ball(spec.dims, spec.ball_radius)
    spacing = np.array([2.0 / n for n in spec.dims])
    return DenseVolume.centered(data, spacing)


def desk_geometry(mode="parallel", views=25, detector=(128, 128)) -> ScanGeometry:
    """Circular scan covering the normalized [-1, 1] domain."""
    rows, cols = detector
    if mode == "parallel":
        return ScanGeometry("parallel", rows, cols, 2.0 / cols, uniform_angles(views))
    # magnification 2, detector sized to cover [-1, 1] at the rotation axis
    return ScanGeometry("cone", rows, cols, 4.0 / cols, uniform_angles(views),
                        source_to_axis=4.0, axis_to_detector=4.0)


# ----------------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------------


def _pixel_rays(geometry, view_index):
    d, eu, ev = geometry.frame(view_index)
    u, v = geometry.detector_coords()
    uu, vv = np.meshgrid(u, v)
    uu, vv = uu.reshape(-1), vv.reshape(-1)
    if geometry.mode == "parallel":
        starts = uu[:, None] * eu + vv[:, None] * ev
        dirs = np.broadcast_to(d, starts.shape)
    else:
        src = -geometry.source_to_axis * d
        tgt = geometry.axis_to_detector * d + uu[:, None] * eu + vv[:, None] * ev
        starts = np.broadcast_to(src, tgt.shape)
        dirs = tgt - src
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return starts, dirs


def _clip_to_box(starts, dirs, lo, hi):
    """Slab-method entry/exit parameters; ``tmax < tmin`` means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - starts) * inv
        t2 = (hi - starts) * inv
    tlo = np.where(np.isfinite(t1), np.minimum(t1, t2), -np.inf)
    thi = np.where(np.isfinite(t1), np.maximum(t1, t2), np.inf)
    # a ray parallel to a slab is inside it iff its start is
    par = ~np.isfinite(t1)
    outside = par & ((starts < lo) | (starts > hi))
    tlo = np.where(outside, np.inf, tlo)
    thi = np.where(outside, -np.inf, thi)
    return tlo.max(axis=1), thi.min(axis=1)


def project_volume(volume: DenseVolume, geometry: ScanGeometry,
                   step_fraction: float = 0.5) -> ProjectionStack:
    """Line integrals of the trilinearly interpolated volume along every pixel ray.

    Integration uses the midpoint rule over the clipped chord, with the chord
    split into equal steps no longer than ``step_fraction * min(spacing)``.
    Equal splitting makes the samples symmetric under reversing the ray.
    """
    if not 0 < step_fraction <= 0.5:
        raise InvalidParameterError("step_fraction must lie in (0, 0.5]")
    step = step_fraction * float(volume.spacing.min())
    data = np.asarray(volume.data, dtype=np.float64)
    # interpolant support: one spacing beyond the outer voxel centers
    lo = volume.origin - volume.spacing
    hi = volume.origin + np.array(volume.dims) * volume.spacing
    images = np.zeros((geometry.num_views, geometry.detector_rows, geometry.detector_cols))
    hits = 0
    for v in range(geometry.num_views):
        starts, dirs = _pixel_rays(geometry, v)
        t0, t1 = _clip_to_box(starts, dirs, lo, hi)
        length = np.maximum(t1 - t0, 0.0)
        nsteps = np.ceil(length / step - 1e-9).astype(np.int64)
        t0 = np.where(nsteps > 0, t0, 0.0)
        steps = np.where(nsteps > 0, length / np.maximum(nsteps, 1), 0.0)
        hits += int(np.count_nonzero(nsteps))
        vals = backend.march_rays(data, volume.origin, volume.spacing, starts, dirs,
                                  t0, nsteps, steps)
        images[v] = vals.reshape(geometry.detector_rows, geometry.detector_cols)
    if hits == 0:
        warnings.warn("no ray intersects the volume; projections are all zero",
                      SimulationWarning, stacklevel=2)
    return ProjectionStack(geometry, images)


def add_noise(stack: ProjectionStack, noise: NoiseSpec) -> ProjectionStack:
    """Poisson photon counting plus additive electronic noise on line integrals."""
    rng = np.random.default_rng(noise.seed)
    i0 = noise.photon_count_i0
    counts = rng.poisson(i0 * np.exp(-stack.images))
    out = -np.log(np.maximum(counts, 1) / i0)
    if noise.electronic_sigma > 0:
        out = out + rng.normal(0.0, noise.electronic_sigma, out.shape)
    return ProjectionStack(stack.geometry, out)
