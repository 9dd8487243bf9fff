"""Dense density volumes from a Gaussian cloud, tile by tile.

A kernel contributes to a voxel only when the voxel center lies inside the
kernel's confidence ellipsoid. Tiles only decide which kernels are visited,
and every tile that holds such a voxel retains the kernel, so the output does
not depend on the tile size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .core import DenseVolume, GaussianCloud, KernelGraph
from .errors import InvalidParameterError
from .render import (KernelGradients, _prec6, chain_graph_density, confidence_radius,
                     effective_density, precision_vjp)


@dataclass(frozen=True)
class VoxelizeConfig:
    tile_edge: int = 8
    confidence: float = 0.999
    use_graph_density: bool = True

    def __post_init__(self):
        if int(self.tile_edge) < 1:
            raise InvalidParameterError("tile_edge must be >= 1")
        if not 0 < self.confidence < 1:
            raise InvalidParameterError("confidence must lie in (0, 1)")


def _half_extents(cloud, radius):
    """Axis-aligned half extents of each kernel's confidence ellipsoid."""
    cov = cloud.covariances()
    return radius * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1], cov[:, 2, 2]], axis=1))


def _retained(lo, hi, pos, half, sphere):
    """Conservative ellipsoid/box intersection test, vectorized over kernels.

    Two necessary conditions, both exact for their own shapes: the ellipsoid's
    bounding box meets the tile, and its bounding sphere meets the tile.
    """
    box_hit = np.all((pos + half >= lo) & (pos - half <= hi), axis=1)
    nearest = np.clip(pos, lo, hi)
    dist2 = np.sum((pos - nearest) ** 2, axis=1)
    return box_hit & (dist2 <= sphere * sphere)


def cull_for_tile(cloud: GaussianCloud, tile_aabb, confidence: float):
    """Indices of kernels whose confidence ellipsoid may intersect ``tile_aabb``."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    box = np.asarray(tile_aabb, dtype=np.float64).reshape(2, 3)
    radius = confidence_radius(confidence)
    half = _half_extents(cloud, radius)
    sphere = radius * cloud.scale.max(axis=1)
    return np.flatnonzero(_retained(box[0], box[1], cloud.position, half, sphere))


def grid_of(dims, spacing, origin):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidParameterError("dims must be three positive integers")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), (3,)).copy()
    if np.any(spacing <= 0):
        raise InvalidParameterError("spacing must be positive")
    return dims, spacing, origin


def kernel_voxel_boxes(cloud, dims, spacing, origin, radius):
    """Per-kernel voxel index box ``[x0, x1, y0, y1, z0, z1)`` of its ellipsoid."""
    half = _half_extents(cloud, radius)
    lo = (cloud.position - half - origin) / spacing
    hi = (cloud.position + half - origin) / spacing
    n = np.array(dims)
    i0 = np.clip(np.ceil(lo - 1e-9).astype(np.int64), 0, n)
    i1 = np.clip(np.floor(hi + 1e-9).astype(np.int64) + 1, 0, n)
    boxes = np.empty((len(cloud), 6), dtype=np.int64)
    boxes[:, 0::2] = i0
    boxes[:, 1::2] = np.maximum(i1, i0)
    return boxes


def tile_lists(cloud, dims, spacing, origin, cfg: VoxelizeConfig):
    """CSR of retained kernels per tile plus each tile's voxel index box."""
    t = int(cfg.tile_edge)
    starts = [np.arange(0, n, t) for n in dims]
    radius = confidence_radius(cfg.confidence)
    half = _half_extents(cloud, radius)
    sphere = radius * cloud.scale.max(axis=1)
    # drop kernels that miss the whole grid before the per-tile tests
    cand = np.flatnonzero(_retained(origin, origin + (np.array(dims) - 1) * spacing,
                                    cloud.position, half, sphere))
    pos, half, sphere = cloud.position[cand], half[cand], sphere[cand]
    ptr = [0]
    kernels = []
    tboxes = []
    for x0 in starts[0]:
        for y0 in starts[1]:
            for z0 in starts[2]:
                i0 = np.array([x0, y0, z0])
                i1 = np.minimum(i0 + t, dims)
                # box spanned by the tile's voxel centers
                lo = origin + i0 * spacing
                hi = origin + (i1 - 1) * spacing
                keep = cand[_retained(lo, hi, pos, half, sphere)]
                kernels.append(keep)
                ptr.append(ptr[-1] + keep.size)
                tboxes.append([i0[0], i1[0], i0[1], i1[1], i0[2], i1[2]])
    kern = np.concatenate(kernels) if kernels else np.zeros(0, dtype=np.int64)
    return (np.asarray(ptr, dtype=np.int64), kern.astype(np.int64),
            np.asarray(tboxes, dtype=np.int64).reshape(-1, 6))


def _density_and_aux(cloud, graph, cfg):
    if cfg.use_graph_density and graph is not None:
        return effective_density(cloud, graph)
    return cloud.rho, None


def voxelize(cloud: GaussianCloud, graph: KernelGraph | None, dims, spacing, origin,
             cfg: VoxelizeConfig = VoxelizeConfig()) -> DenseVolume:
    """Sample the density field at voxel centers.

    ``graph`` is ignored when ``cfg.use_graph_density`` is off.
    """
    dims, spacing, origin = grid_of(dims, spacing, origin)
    if len(cloud) == 0:
        return DenseVolume(np.zeros(dims), spacing, origin)
    rho, _ = _density_and_aux(cloud, graph, cfg)
    radius = confidence_radius(cfg.confidence)
    ptr, kern, tboxes = tile_lists(cloud, dims, spacing, origin, cfg)
    boxes = kernel_voxel_boxes(cloud, dims, spacing, origin, radius)
    data = backend.voxel_forward(ptr, kern, tboxes, boxes, origin, spacing, dims,
                                 cloud.position, _prec6(cloud), rho, radius * radius)
    return DenseVolume(data, spacing, origin)


def voxelize_backward(cloud: GaussianCloud, graph: KernelGraph | None, dims, spacing, origin,
                      dl_dvoxels, cfg: VoxelizeConfig = VoxelizeConfig()) -> KernelGradients:
    """Gradients of ``sum(dl_dvoxels * voxelize(...))`` for every kernel."""
    dims, spacing, origin = grid_of(dims, spacing, origin)
    dl = np.asarray(dl_dvoxels, dtype=np.float64)
    if dl.shape != dims:
        raise InvalidParameterError(f"dL/dvoxels shape {dl.shape} does not match dims {dims}")
    m = len(cloud)
    if m == 0:
        return KernelGradients.zeros(0)
    rho, aux = _density_and_aux(cloud, graph, cfg)
    radius = confidence_radius(cfg.confidence)
    boxes = kernel_voxel_boxes(cloud, dims, spacing, origin, radius)
    d_rho_eff, d_pos, d_prec6 = backend.voxel_backward(boxes, origin, spacing, dl,
                                                       cloud.position, _prec6(cloud), rho,
                                                       radius * radius)
    d_scale, d_rot = precision_vjp(cloud.scale, cloud.rotation, d_prec6)
    d_rho, d_pos_graph = chain_graph_density(cloud, graph if aux is not None else None,
                                             aux, d_rho_eff)
    return KernelGradients(d_rho, d_pos + d_pos_graph, d_scale, d_rot)
