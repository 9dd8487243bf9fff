"""Mutual k-nearest-neighbour graph over kernel centers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianCloud, KernelGraph
from .errors import InvalidParameterError

EXHAUSTIVE_LIMIT = 2000
_EXTRA = 4


@dataclass(frozen=True)
class GraphConfig:
    knn_k: int = 6
    scaling_k: float = 6.0

    def __post_init__(self):
        if int(self.knn_k) < 1:
            raise InvalidParameterError("knn_k must be >= 1")
        if not self.scaling_k > 0:
            raise InvalidParameterError("scaling_k must be positive")


def edge_weight(p_i, p_j, scaling_k):
    """``exp(-|p_i - p_j|^2 / k)``; works on single points or batches."""
    if not scaling_k > 0:
        raise InvalidParameterError("scaling_k must be positive")
    diff = np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    return np.exp(-np.sum(diff * diff, axis=-1) / scaling_k)


def _sq_dist(pos, i, cand):
    diff = pos[cand] - pos[i]
    return np.sum(diff * diff, axis=-1)


def knn_exhaustive(positions, k):
    """Indices of the ``k`` nearest others per point, ordered by (distance, index)."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    k = min(k, n - 1)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        d2 = _sq_dist(pos, i, idx)
        d2[i] = np.inf
        # stable sort keeps equal distances in index order
        out[i] = np.argsort(d2, kind="stable")[:k]
    return out


def knn_tree(positions, k):
    """Same result as :func:`knn_exhaustive`, via a k-d tree candidate search."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    k = min(k, n - 1)
    kq = min(n, k + 1 + _EXTRA)
    _, cand = cKDTree(pos).query(pos, k=kq)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, kq)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        c = cand[i][cand[i] != i]
        d2 = _sq_dist(pos, i, c)
        order = np.lexsort((c, d2))
        c, d2 = c[order], d2[order]
        if kq < n and c.shape[0] > k and d2[k - 1] >= d2[-1]:
            # tie reaches the edge of the candidate list: fall back to all points
            others = np.arange(n)
            d2 = _sq_dist(pos, i, others)
            d2[i] = np.inf
            c = np.argsort(d2, kind="stable")
        out[i] = c[:k]
    return out


def mutual_edges(knn):
    """Undirected edges ``(i, j), i < j`` present in both directions of ``knn``."""
    n, k = knn.shape
    src = np.repeat(np.arange(n), k)
    dst = knn.reshape(-1)
    key = src * n + dst
    rev = dst * n + src
    both = np.isin(key, rev)
    keep = both & (src < dst)
    return np.stack([src[keep], dst[keep]], axis=1)


def build_mutual_knn(positions, cfg: GraphConfig = GraphConfig()) -> KernelGraph:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    if n < 2:
        raise InvalidParameterError("mutual KNN needs at least 2 positions")
    k = int(cfg.knn_k)
    knn = knn_exhaustive(pos, k) if n < EXHAUSTIVE_LIMIT else knn_tree(pos, k)
    edges = mutual_edges(knn)
    w = edge_weight(pos[edges[:, 0]], pos[edges[:, 1]], cfg.scaling_k)
    return KernelGraph.from_edges(n, edges, w, cfg.scaling_k)


def graph_for_cloud(cloud: GaussianCloud, cfg: GraphConfig = GraphConfig()) -> KernelGraph:
    if len(cloud) < 2:
        return KernelGraph.edgeless(len(cloud), cfg.scaling_k)
    return build_mutual_knn(cloud.position, cfg)


def refresh_weights(graph: KernelGraph, positions):
    """Same edges, weights recomputed for moved positions."""
    rows = graph.rows()
    return graph.with_weights(edge_weight(positions[rows], positions[graph.indices],
                                          graph.scaling_k))


def laplacian_energy(cloud: GaussianCloud, graph: KernelGraph):
    """``sum_i sum_{j in N(i)} w_ij (rho_i - rho_j)^2`` and its gradient in rho.

    Each undirected edge is visited twice (once from each end), so the
    gradient is ``4 sum_j w_ij (rho_i - rho_j)``.
    """
    graph.check_cloud(cloud)
    rows = graph.rows()
    diff = cloud.rho[rows] - cloud.rho[graph.indices]
    energy = float(np.sum(graph.weights * diff * diff))
    grad = np.zeros(len(cloud))
    np.add.at(grad, rows, 4.0 * graph.weights * diff)
    return energy, grad


def density_difference_sums(cloud: GaussianCloud, graph: KernelGraph):
    """``sum_{j in N(i)} |rho_i - rho_j|`` for every kernel."""
    graph.check_cloud(cloud)
    rows = graph.rows()
    out = np.zeros(len(cloud))
    np.add.at(out, rows, np.abs(cloud.rho[rows] - cloud.rho[graph.indices]))
    return out


def density_difference_sum(cloud: GaussianCloud, graph: KernelGraph, i: int) -> float:
    if not 0 <= i < len(cloud):
        raise InvalidParameterError(f"kernel index {i} out of range")
    nb = graph.neighbors(i)
    return float(np.sum(np.abs(cloud.rho[i] - cloud.rho[nb])))
