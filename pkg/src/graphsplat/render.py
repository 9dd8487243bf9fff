"""Differentiable X-ray projection of a Gaussian cloud.

Each pixel value is the sum over kernels of the exact line integral of the
kernel along the pixel's ray. There is no compositing: attenuation adds up,
so the forward model is linear in the densities and the gradient is closed
form.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from . import backend
from .core import (GaussianCloud, GaussianKernel, KernelGraph, ScanGeometry, graph_multipliers,
                   quat_rotmat_vjp, quat_to_rotmat)
from .errors import InvalidParameterError


class GeometryWarning(UserWarning):
    pass


def confidence_radius(confidence):
    """Mahalanobis radius of the ``confidence`` ellipsoid of a 3-D Gaussian."""
    if not 0 < confidence < 1:
        raise InvalidParameterError("confidence must lie in (0, 1)")
    return float(np.sqrt(chi2.ppf(confidence, 3)))


@dataclass(frozen=True)
class RenderConfig:
    # 0.999 rather than 0.99: the tail past the 0.99 ellipsoid is 3.4e-3 of a
    # kernel's peak, which would break the 1e-3 per-pixel culling budget.
    confidence: float = 0.999
    cull: bool = True


@dataclass(frozen=True)
class ViewRays:
    origins: np.ndarray      # (rows*cols, 3)
    dirs: np.ndarray         # (rows*cols, 3), unit
    ndc_map: np.ndarray      # (2, 3): ndc = ndc_map @ (col, row, 1)
    view_index: int


def view_rays(geometry: ScanGeometry, view_index: int) -> ViewRays:
    d, eu, ev = geometry.frame(view_index)
    u, v = geometry.detector_coords()
    uu, vv = np.meshgrid(u, v)              # (rows, cols)
    uu, vv = uu.reshape(-1), vv.reshape(-1)
    if geometry.mode == "parallel":
        origins = uu[:, None] * eu + vv[:, None] * ev
        dirs = np.broadcast_to(d, origins.shape).copy()
    else:
        src = -geometry.source_to_axis * d
        target = geometry.source_to_detector * d + uu[:, None] * eu + vv[:, None] * ev
        dirs = target
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(src, dirs.shape).copy()
    nr, nc = geometry.detector_rows, geometry.detector_cols
    ndc_map = np.array([[2.0 / nc, 0.0, -(nc - 1) / nc],
                        [0.0, 2.0 / nr, -(nr - 1) / nr]])
    return ViewRays(origins, dirs, ndc_map, view_index)


def all_view_rays(geometry):
    return [view_rays(geometry, i) for i in range(geometry.num_views)]


# ----------------------------------------------------------------------------
# single-ray closed form
# ----------------------------------------------------------------------------


def ray_integral(kernel: GaussianKernel, o, d):
    """Integral of the kernel density along the full line ``o + t d``."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    A = kernel.precision
    q = o - kernel.position
    Ad = A @ d
    a = d @ Ad
    b = q @ Ad
    c = q @ A @ q
    return float(kernel.rho * np.sqrt(2 * np.pi / a) * np.exp(-0.5 * (c - b * b / a)))


# ----------------------------------------------------------------------------
# center projection
# ----------------------------------------------------------------------------


def _center_frame(p, geometry, view_index):
    d, eu, ev = geometry.frame(view_index)
    p = np.asarray(p, dtype=np.float64)
    return p @ eu, p @ ev, p @ d, (d, eu, ev)


def project_center_ndc(p, geometry: ScanGeometry, view_index: int):
    """NDC coordinates in [-1, 1]^2 of a point (or ``(M, 3)`` points) on the detector."""
    au, av, ad, _ = _center_frame(p, geometry, view_index)
    hw, hh = geometry.half_extent()
    if geometry.mode == "parallel":
        return np.stack([au / hw, av / hh], axis=-1)
    t = _safe_depth(geometry.source_to_axis + ad, geometry)
    mag = geometry.source_to_detector / t
    return np.stack([au * mag / hw, av * mag / hh], axis=-1)


def _safe_depth(t, geometry):
    eps = 1e-6 * geometry.source_to_axis
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= eps):
        warnings.warn("point at or behind the source; depth clamped", GeometryWarning,
                      stacklevel=3)
        t = np.maximum(t, eps)
    return t


def ndc_jacobian(p, geometry, view_index):
    """``d ndc / d p`` with shape ``(M, 2, 3)``."""
    p = np.atleast_2d(p)
    au, av, ad, (d, eu, ev) = _center_frame(p, geometry, view_index)
    hw, hh = geometry.half_extent()
    J = np.empty((p.shape[0], 2, 3))
    if geometry.mode == "parallel":
        J[:, 0] = eu / hw
        J[:, 1] = ev / hh
        return J
    t = _safe_depth(geometry.source_to_axis + ad, geometry)
    D = geometry.source_to_detector
    J[:, 0] = D / (hw * t)[:, None] * (eu[None] - (au / t)[:, None] * d[None])
    J[:, 1] = D / (hh * t)[:, None] * (ev[None] - (av / t)[:, None] * d[None])
    return J


def ndc_lift(p, geometry, view_index):
    """Right inverse of :func:`ndc_jacobian` that keeps depth fixed, ``(M, 3, 2)``.

    Moving a center by ``L @ delta_ndc`` shifts its projection by ``delta_ndc``
    to first order without changing its distance along the central ray.
    """
    p = np.atleast_2d(p)
    _, _, ad, (d, eu, ev) = _center_frame(p, geometry, view_index)
    hw, hh = geometry.half_extent()
    L = np.empty((p.shape[0], 3, 2))
    if geometry.mode == "parallel":
        L[:, :, 0] = eu * hw
        L[:, :, 1] = ev * hh
        return L
    t = _safe_depth(geometry.source_to_axis + ad, geometry)
    s = t / geometry.source_to_detector
    L[:, :, 0] = eu[None] * (hw * s)[:, None]
    L[:, :, 1] = ev[None] * (hh * s)[:, None]
    return L


# ----------------------------------------------------------------------------
# footprints
# ----------------------------------------------------------------------------


def _pixel_range(lo, hi, pitch, n):
    """Pixel index half-open interval whose centers fall in ``[lo, hi]``."""
    off = (n - 1) / 2
    i0 = np.ceil(lo / pitch + off - 1e-9).astype(np.int64)
    i1 = np.floor(hi / pitch + off + 1e-9).astype(np.int64) + 1
    return np.clip(i0, 0, n), np.clip(i1, 0, n)


def footprint_boxes(cloud: GaussianCloud, geometry: ScanGeometry, view_index, radius, cull=True):
    """Per-kernel detector pixel box ``[r0, r1, c0, c1)`` holding every ray that
    meets the kernel's ``radius`` ellipsoid. Without culling every box is the
    whole detector."""
    m = len(cloud)
    nr, nc = geometry.detector_rows, geometry.detector_cols
    boxes = np.zeros((m, 4), dtype=np.int64)
    if not cull:
        boxes[:, 1] = nr
        boxes[:, 3] = nc
        return boxes
    d, eu, ev = geometry.frame(view_index)
    p = cloud.position
    au, av, ad = p @ eu, p @ ev, p @ d
    pitch = geometry.pixel_pitch
    if geometry.mode == "parallel":
        cov = cloud.covariances()
        hu = radius * np.sqrt(np.einsum("i,mij,j->m", eu, cov, eu))
        hv = radius * np.sqrt(np.einsum("i,mij,j->m", ev, cov, ev))
        ulo, uhi, vlo, vhi = au - hu, au + hu, av - hv, av + hv
    else:
        R = radius * cloud.scale.max(axis=1)
        D = geometry.source_to_detector
        tmin = geometry.source_to_axis + ad - R
        tmax = geometry.source_to_axis + ad + R
        behind = tmin <= 1e-6 * geometry.source_to_axis
        tmin = np.where(behind, 1.0, tmin)
        cand_u = np.stack([(au + su * R) * D / t for su in (-1, 1) for t in (tmin, tmax)])
        cand_v = np.stack([(av + sv * R) * D / t for sv in (-1, 1) for t in (tmin, tmax)])
        ulo, uhi = cand_u.min(axis=0), cand_u.max(axis=0)
        vlo, vhi = cand_v.min(axis=0), cand_v.max(axis=0)
        big = 1e30
        ulo, vlo = np.where(behind, -big, ulo), np.where(behind, -big, vlo)
        uhi, vhi = np.where(behind, big, uhi), np.where(behind, big, vhi)
    boxes[:, 2], boxes[:, 3] = _pixel_range(ulo, uhi, pitch, nc)
    boxes[:, 0], boxes[:, 1] = _pixel_range(vlo, vhi, pitch, nr)
    return boxes


def _prec6(cloud):
    P = cloud.precisions()
    return np.stack([P[:, 0, 0], P[:, 1, 1], P[:, 2, 2], P[:, 0, 1], P[:, 0, 2], P[:, 1, 2]],
                    axis=1)


def _sym_from6(g6):
    G = np.empty((g6.shape[0], 3, 3))
    G[:, 0, 0], G[:, 1, 1], G[:, 2, 2] = g6[:, 0], g6[:, 1], g6[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = g6[:, 3]
    G[:, 0, 2] = G[:, 2, 0] = g6[:, 4]
    G[:, 1, 2] = G[:, 2, 1] = g6[:, 5]
    return G


def precision_vjp(scale, rotation, d_prec6):
    """Chain ``dL/dA`` (A = R diag(1/s^2) R^T) to scale and quaternion gradients."""
    G = _sym_from6(d_prec6)
    R = quat_to_rotmat(rotation)
    inv_s2 = 1.0 / scale ** 2
    RtGR = np.einsum("mki,mkl,mlj->mij", R, G, R)
    d_scale = -2.0 * inv_s2 / scale * np.einsum("mii->mi", RtGR)
    dR = 2.0 * np.einsum("mik,mkj->mij", G, R) * inv_s2[:, None, :]
    return d_scale, quat_rotmat_vjp(rotation, dR)


# ----------------------------------------------------------------------------
# graph-density helpers
# ----------------------------------------------------------------------------


def positional_weights(cloud, graph: KernelGraph):
    rows = graph.rows()
    diff = cloud.position[rows] - cloud.position[graph.indices]
    return np.exp(-np.sum(diff * diff, axis=1) / graph.scaling_k), rows, diff


def effective_density(cloud, graph):
    """Densities of the equivalent plain mixture when neighbours add to each kernel."""
    if graph is None:
        return cloud.rho, None
    graph.check_cloud(cloud)
    w, rows, diff = positional_weights(cloud, graph)
    c = graph_multipliers(graph, w)
    return cloud.rho * c, (c, w, rows, diff)


def chain_graph_density(cloud, graph, aux, d_rho_eff):
    """Turn gradients w.r.t. effective densities into ``(d_rho, d_position_extra)``."""
    if graph is None:
        return d_rho_eff, 0.0
    c, w, rows, diff = aux
    d_rho = c * d_rho_eff
    d_c = cloud.rho * d_rho_eff
    # each directed entry (i, j) carries w_ij inside c_i
    d_w = d_c[rows]
    coef = (d_w * w * (-2.0 / graph.scaling_k))[:, None] * diff   # d w_ij / d p_i
    d_pos = np.zeros_like(cloud.position)
    np.add.at(d_pos, rows, coef)
    np.add.at(d_pos, graph.indices, -coef)
    return d_rho, d_pos


# ----------------------------------------------------------------------------
# render
# ----------------------------------------------------------------------------


@dataclass
class KernelGradients:
    d_rho: np.ndarray
    d_position: np.ndarray
    d_scale: np.ndarray
    d_rotation: np.ndarray
    d_ndc: np.ndarray | None = None
    contributed: np.ndarray | None = None

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros(m), np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)),
                   np.zeros((m, 2)), np.zeros(m, dtype=bool))

    def __add__(self, other):
        return KernelGradients(self.d_rho + other.d_rho, self.d_position + other.d_position,
                               self.d_scale + other.d_scale, self.d_rotation + other.d_rotation,
                               self.d_ndc, self.contributed)

    def scaled(self, s):
        return KernelGradients(s * self.d_rho, s * self.d_position, s * self.d_scale,
                               s * self.d_rotation, self.d_ndc, self.contributed)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in
                   (self.d_rho, self.d_position, self.d_scale, self.d_rotation))


def _resolve(geometry, view_index, rays, config):
    if rays is None:
        rays = view_rays(geometry, view_index)
    return rays, config or RenderConfig()


def render_view(cloud: GaussianCloud, geometry: ScanGeometry, view_index: int,
                graph: KernelGraph | None = None, config: RenderConfig | None = None,
                rays: ViewRays | None = None):
    """Projection image ``(rows, cols)`` of the cloud for one view.

    With ``graph`` the neighbour-augmented density is projected instead of the
    plain mixture.
    """
    rays, config = _resolve(geometry, view_index, rays, config)
    shape = (geometry.detector_rows, geometry.detector_cols)
    if len(cloud) == 0:
        return np.zeros(shape)
    rho_eff, _ = effective_density(cloud, graph)
    boxes = footprint_boxes(cloud, geometry, view_index,
                            confidence_radius(config.confidence), config.cull)
    img = backend.render_forward(rays.origins, rays.dirs, geometry.detector_cols, boxes,
                                 cloud.position, _prec6(cloud), rho_eff)
    return img.reshape(shape)


def render_backward(cloud: GaussianCloud, geometry: ScanGeometry, view_index: int, dl_dimage,
                    graph: KernelGraph | None = None, config: RenderConfig | None = None,
                    rays: ViewRays | None = None) -> KernelGradients:
    """Gradients of ``sum(dl_dimage * render_view(...))`` for every kernel.

    ``d_ndc`` is the gradient with respect to each kernel's projected center,
    taken from the footprint (splat) part of the positional gradient only.
    """
    rays, config = _resolve(geometry, view_index, rays, config)
    dl = np.asarray(dl_dimage, dtype=np.float64)
    if dl.shape != (geometry.detector_rows, geometry.detector_cols):
        raise InvalidParameterError(f"dL/dimage shape {dl.shape} does not match the detector")
    m = len(cloud)
    if m == 0:
        return KernelGradients.zeros(0)
    rho_eff, aux = effective_density(cloud, graph)
    boxes = footprint_boxes(cloud, geometry, view_index,
                            confidence_radius(config.confidence), config.cull)
    boxes_nonempty = (boxes[:, 1] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 2])
    d_rho_eff, d_pos, d_prec6 = backend.render_backward(
        rays.origins, rays.dirs, geometry.detector_cols, boxes, cloud.position, _prec6(cloud),
        rho_eff, dl.reshape(-1))
    d_scale, d_rot = precision_vjp(cloud.scale, cloud.rotation, d_prec6)
    lift = ndc_lift(cloud.position, geometry, view_index)
    d_ndc = np.einsum("mij,mi->mj", lift, d_pos)
    d_rho, d_pos_graph = chain_graph_density(cloud, graph, aux, d_rho_eff)
    contributed = boxes_nonempty & (rho_eff > 0)
    return KernelGradients(d_rho, d_pos + d_pos_graph, d_scale, d_rot, d_ndc, contributed)
