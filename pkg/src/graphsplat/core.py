"""Domain types and closed-form density evaluation.

World coordinates are right-handed with the rotation axis along +z. A kernel's
covariance is ``R diag(s)^2 R^T`` where ``R`` comes from a unit quaternion
stored as ``(w, x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InconsistentStateError, InvalidParameterError

SCALE_FLOOR = 1e-6


def _as_vec(v, n, name):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise InvalidParameterError(f"{name} must have {n} components, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} must be finite")
    return a


# ----------------------------------------------------------------------------
# rotations and covariances
# ----------------------------------------------------------------------------


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(q)):
        raise InvalidParameterError("quaternion must be finite and non-zero")
    return q / norm


def quat_to_rotmat(q):
    """Rotation matrices for quaternions ``(..., 4)``; renormalizes first."""
    n = normalize_quaternions(q)
    w, x, y, z = n[..., 0], n[..., 1], n[..., 2], n[..., 3]
    R = np.empty(n.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_vjp(q, dR):
    """Pull ``dL/dR`` back to the raw (unnormalized) quaternion.

    The result is tangent to the sphere of quaternions of the same norm,
    because the rotation only depends on the direction of ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    n = q / norm
    w, x, y, z = n[..., 0], n[..., 1], n[..., 2], n[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dn = np.stack([dw, dx, dy, dz], axis=-1)
    dn -= n * np.sum(n * dn, axis=-1, keepdims=True)
    return dn / norm


def _check_scale(scale):
    scale = np.asarray(scale, dtype=np.float64)
    if not np.all(np.isfinite(scale)):
        raise InvalidParameterError("scale must be finite")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be strictly positive")
    return scale


def covariance_from(scale, rotation):
    """Return ``R diag(scale)^2 R^T`` for one kernel or a batch."""
    scale = _check_scale(scale)
    R = quat_to_rotmat(rotation)
    RS = R * scale[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


def precision_from(scale, rotation):
    """Inverse covariance built from the decomposition, ``R diag(1/s^2) R^T``."""
    scale = _check_scale(scale)
    R = quat_to_rotmat(rotation)
    RS = R / scale[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


# ----------------------------------------------------------------------------
# domain types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    rho: float
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        rho = float(self.rho)
        if not np.isfinite(rho):
            raise InvalidParameterError("rho must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "position", _as_vec(self.position, 3, "position"))
        object.__setattr__(self, "scale", _check_scale(_as_vec(self.scale, 3, "scale")))
        object.__setattr__(self, "rotation",
                           normalize_quaternions(_as_vec(self.rotation, 4, "rotation")))

    @property
    def covariance(self):
        return covariance_from(self.scale, self.rotation)

    @property
    def precision(self):
        return precision_from(self.scale, self.rotation)


@dataclass(frozen=True)
class GaussianCloud:
    """Struct-of-arrays kernel set with its reconstruction domain.

    ``bbox`` is ``[[xmin, ymin, zmin], [xmax, ymax, zmax]]``.
    """

    rho: np.ndarray
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    bbox: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64).reshape(-1)
        m = rho.shape[0]
        position = np.asarray(self.position, dtype=np.float64).reshape(m, 3)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(m, 3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(m, 4)
        bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        for name, arr in (("rho", rho), ("position", position), ("scale", scale),
                          ("rotation", rotation), ("bbox", bbox)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"cloud {name} must be finite")
        if np.any(scale <= 0):
            raise InvalidParameterError("cloud scales must be strictly positive")
        if np.any(bbox[1] <= bbox[0]):
            raise InvalidParameterError("bbox must have positive extent")
        if m:
            rotation = normalize_quaternions(rotation)
        for arr in (rho, position, scale, rotation, bbox):
            arr.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "bbox", bbox)

    def __len__(self):
        return self.rho.shape[0]

    @classmethod
    def from_kernels(cls, kernels: Sequence[GaussianKernel], bbox):
        if not kernels:
            return cls.empty(bbox)
        return cls(
            rho=np.array([k.rho for k in kernels]),
            position=np.array([k.position for k in kernels]),
            scale=np.array([k.scale for k in kernels]),
            rotation=np.array([k.rotation for k in kernels]),
            bbox=bbox,
        )

    @classmethod
    def empty(cls, bbox):
        return cls(np.zeros(0), np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), bbox)

    def kernel(self, i) -> GaussianKernel:
        return GaussianKernel(self.rho[i], self.position[i], self.scale[i], self.rotation[i])

    @property
    def kernels(self):
        return [self.kernel(i) for i in range(len(self))]

    def replace(self, **changes):
        fields = dict(rho=self.rho, position=self.position, scale=self.scale,
                      rotation=self.rotation, bbox=self.bbox)
        fields.update(changes)
        return GaussianCloud(**fields)

    def subset(self, idx):
        idx = np.asarray(idx)
        return self.replace(rho=self.rho[idx], position=self.position[idx],
                            scale=self.scale[idx], rotation=self.rotation[idx])

    def concat(self, other: "GaussianCloud"):
        return self.replace(
            rho=np.concatenate([self.rho, other.rho]),
            position=np.concatenate([self.position, other.position]),
            scale=np.concatenate([self.scale, other.scale]),
            rotation=np.concatenate([self.rotation, other.rotation]),
        )

    def precisions(self):
        return precision_from(self.scale, self.rotation)

    def covariances(self):
        return covariance_from(self.scale, self.rotation)


@dataclass(frozen=True)
class KernelGraph:
    """Symmetric adjacency in CSR form: ``indices[indptr[i]:indptr[i+1]]`` is N(i)."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    scaling_k: float = 6.0

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if indptr.ndim != 1 or indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise InvalidParameterError("malformed indptr")
        if indices.shape != (indptr[-1],) or weights.shape != indices.shape:
            raise InvalidParameterError("indices/weights length must equal indptr[-1]")
        if not self.scaling_k > 0:
            raise InvalidParameterError("scaling_k must be positive")
        for arr in (indptr, indices, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "scaling_k", float(self.scaling_k))

    @classmethod
    def edgeless(cls, n, scaling_k=6.0):
        return cls(np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0), scaling_k)

    @classmethod
    def from_edges(cls, n, edges, weights, scaling_k=6.0):
        """Build from undirected edges ``(i, j)`` with one weight each."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        w = np.concatenate([weights, weights])
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return cls(np.cumsum(indptr), dst, w, scaling_k)

    @property
    def num_nodes(self):
        return self.indptr.shape[0] - 1

    @property
    def num_edges(self):
        """Undirected edge count."""
        return self.indices.shape[0] // 2

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def neighbor_weights(self, i):
        return self.weights[self.indptr[i]:self.indptr[i + 1]]

    def degree(self):
        return np.diff(self.indptr)

    def rows(self):
        """Source node of every directed edge entry."""
        return np.repeat(np.arange(self.num_nodes), self.degree())

    def with_weights(self, weights):
        return KernelGraph(self.indptr, self.indices, weights, self.scaling_k)

    def check_cloud(self, cloud):
        if self.num_nodes != len(cloud):
            raise InconsistentStateError(
                f"graph has {self.num_nodes} nodes but cloud has {len(cloud)} kernels")


@dataclass(frozen=True)
class ScanGeometry:
    """Circular-trajectory acquisition.

    For view angle ``theta`` the central ray direction is
    ``(cos theta, sin theta, 0)``, the detector u-axis ``(-sin theta, cos theta, 0)``
    and the v-axis ``+z``. In cone mode the source sits at ``-source_to_axis``
    along the central ray and the flat detector at ``+axis_to_detector``.
    """

    mode: str
    detector_rows: int
    detector_cols: int
    pixel_pitch: float
    angles: np.ndarray
    source_to_axis: float = 0.0
    axis_to_detector: float = 0.0

    def __post_init__(self):
        if self.mode not in ("parallel", "cone"):
            raise InvalidParameterError(f"unknown geometry mode {self.mode!r}")
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if self.detector_rows < 2 or self.detector_cols < 2:
            raise InvalidParameterError("detector needs at least 2 rows and 2 columns")
        if not self.pixel_pitch > 0:
            raise InvalidParameterError("pixel_pitch must be positive")
        if angles.size == 0 or not np.all(np.isfinite(angles)):
            raise InvalidParameterError("angles must be finite and non-empty")
        if np.any(angles < 0) or np.any(angles >= 2 * np.pi) or np.any(np.diff(angles) <= 0):
            raise InvalidParameterError("angles must be strictly increasing within [0, 2pi)")
        if self.mode == "cone" and not (self.source_to_axis > 0 and self.axis_to_detector > 0):
            raise InvalidParameterError("cone geometry needs positive source/detector distances")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "detector_rows", int(self.detector_rows))
        object.__setattr__(self, "detector_cols", int(self.detector_cols))
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "source_to_axis", float(self.source_to_axis))
        object.__setattr__(self, "axis_to_detector", float(self.axis_to_detector))

    @property
    def num_views(self):
        return self.angles.shape[0]

    @property
    def source_to_detector(self):
        return self.source_to_axis + self.axis_to_detector

    @property
    def magnification(self):
        return self.source_to_detector / self.source_to_axis if self.mode == "cone" else 1.0

    def frame(self, view_index):
        """``(d, e_u, e_v)`` unit vectors for one view."""
        t = self.angles[view_index]
        c, s = np.cos(t), np.sin(t)
        return np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])

    def detector_coords(self):
        """Detector-plane ``(u, v)`` of every pixel center, shapes ``(cols,)``, ``(rows,)``."""
        u = (np.arange(self.detector_cols) - (self.detector_cols - 1) / 2) * self.pixel_pitch
        v = (np.arange(self.detector_rows) - (self.detector_rows - 1) / 2) * self.pixel_pitch
        return u, v

    def half_extent(self):
        """Half width and half height of the detector, world units."""
        return (self.detector_cols * self.pixel_pitch / 2,
                self.detector_rows * self.pixel_pitch / 2)

    def with_angles(self, angles):
        return ScanGeometry(self.mode, self.detector_rows, self.detector_cols, self.pixel_pitch,
                            angles, self.source_to_axis, self.axis_to_detector)


def uniform_angles(n):
    """``n`` angles uniformly over [0, 2pi), starting at 0."""
    return np.arange(n) * (2 * np.pi / n)


@dataclass(frozen=True)
class DenseVolume:
    """Voxel grid; ``data[ix, iy, iz]`` sits at ``origin + (ix, iy, iz) * spacing``."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidParameterError("volume data must be 3-D")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        spacing = _as_vec(self.spacing, 3, "spacing")
        origin = _as_vec(self.origin, 3, "origin")
        if np.any(spacing <= 0):
            raise InvalidParameterError("spacing must be strictly positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, data, spacing=1.0):
        """Volume whose grid is centered on the world origin."""
        data = np.asarray(data)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
        origin = -(np.array(data.shape) - 1) / 2 * spacing
        return cls(data, spacing, origin)

    @classmethod
    def zeros_like_grid(cls, dims, spacing, origin):
        return cls(np.zeros(tuple(int(d) for d in dims)), spacing, origin)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def axes(self):
        return [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]

    def voxel_centers(self):
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def bbox(self):
        """Region covered by the voxel cells (centers +- half spacing)."""
        lo = self.origin - self.spacing / 2
        hi = self.origin + (np.array(self.dims) - 0.5) * self.spacing
        return np.stack([lo, hi])

    def with_data(self, data):
        return DenseVolume(data, self.spacing, self.origin)


@dataclass(frozen=True)
class ProjectionStack:
    """Images of shape ``(views, rows, cols)``, one per geometry angle."""

    geometry: ScanGeometry
    images: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        g = self.geometry
        if images.shape != (g.num_views, g.detector_rows, g.detector_cols):
            raise InvalidParameterError(
                f"images shape {images.shape} does not match geometry "
                f"{(g.num_views, g.detector_rows, g.detector_cols)}")
        if not np.all(np.isfinite(images)):
            raise InvalidParameterError("projection values must be finite")
        object.__setattr__(self, "images", images)

    @property
    def views(self):
        return list(zip(self.geometry.angles, self.images))

    def subset(self, view_indices):
        idx = np.asarray(view_indices)
        return ProjectionStack(self.geometry.with_angles(self.geometry.angles[idx]),
                               self.images[idx])


# ----------------------------------------------------------------------------
# density evaluation
# ----------------------------------------------------------------------------


def _points(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("evaluation points must be finite")
    return x, single


def gaussian_matrix(position, precision, x):
    """Unit-peak Gaussian values, shape ``(kernels, points)``."""
    q = x[None, :, :] - position[:, None, :]
    maha = np.einsum("mni,mij,mnj->mn", q, precision, q)
    return np.exp(-0.5 * maha)


def eval_density(kernel: GaussianKernel, x):
    """``rho * exp(-(x - p)^T Sigma^-1 (x - p) / 2)`` at one or many points."""
    pts, single = _points(x)
    P = kernel.precision
    if not np.all(np.isfinite(P)):
        raise InvalidParameterError("degenerate kernel covariance")
    out = kernel.rho * gaussian_matrix(kernel.position[None], P[None], pts)[0]
    return float(out[0]) if single else out


def eval_mixture(cloud: GaussianCloud, x):
    pts, single = _points(x)
    if len(cloud) == 0:
        out = np.zeros(pts.shape[0])
    else:
        G = gaussian_matrix(cloud.position, cloud.precisions(), pts)
        out = cloud.rho @ G
    return float(out[0]) if single else out


def eval_graph_density(cloud: GaussianCloud, graph: KernelGraph, x):
    """Graph-augmented density: every kernel adds itself plus its weighted neighbours.

    Evaluated literally as a double sum over kernels and their neighbour lists,
    using the weights stored on the graph.
    """
    graph.check_cloud(cloud)
    pts, single = _points(x)
    if len(cloud) == 0:
        out = np.zeros(pts.shape[0])
    else:
        contrib = cloud.rho[:, None] * gaussian_matrix(cloud.position, cloud.precisions(), pts)
        out = np.zeros(pts.shape[0])
        for i in range(len(cloud)):
            local = contrib[i].copy()
            for j, w in zip(graph.neighbors(i), graph.neighbor_weights(i)):
                local += w * contrib[j]
            out += local
    return float(out[0]) if single else out


def graph_multipliers(graph: KernelGraph, weights=None):
    """Per-kernel factor ``1 + sum_{i in N(j)} w_ij``.

    On a symmetric graph the neighbour-augmented density equals the plain
    mixture with every density scaled by this factor.
    """
    w = graph.weights if weights is None else weights
    c = np.ones(graph.num_nodes)
    np.add.at(c, graph.rows(), w)
    return c
