"""Optimization loop: Adam, adaptive density control and the stopping rule."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (DenseVolume, GaussianCloud, KernelGraph, ProjectionStack,
                   normalize_quaternions, quat_to_rotmat)
from .errors import InvalidParameterError, NonFiniteLossError
from .graph import GraphConfig, density_difference_sums, graph_for_cloud
from .losses import LossWeights, total_loss
from .metrics import psnr_3d
from .render import (KernelGradients, RenderConfig, all_view_rays, effective_density,
                     render_backward, render_view)
from .voxelizer import VoxelizeConfig, voxelize, voxelize_backward

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
DENSITY_PARAMS = ("direct", "softplus")
SCALE_PARAMS = ("direct", "log")
TV_MODES = ("crop", "downsample")
SPLIT_MODES = ("sample", "principal")


@dataclass(frozen=True)
class TrainConfig:
    lr_position: float = 2e-4
    lr_density: float = 1e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    decay_floor_fraction: float = 0.1
    max_iters: int = 10_000
    adc_interval: int = 100
    adc_start: int = 500
    adc_end: int | None = None
    tau_pos: float = 2e-4
    lambda_g: float = 1e-4
    pga_per_view: bool = True
    stop_check_interval: int = 500
    stop_drop_fraction: float = 0.005
    prune_rho_min: float = 1e-4
    split_scale_threshold: float = 0.01
    max_kernels: int = 200_000
    seed: int = 0
    density_param: str = "softplus"
    scale_param: str = "log"
    calibrate_density: bool = True
    graph_density_in_render: bool = True
    preserve_density_on_rebuild: bool = True
    conserve_mass: bool = True
    split_mode: str = "sample"
    tv_mode: str = "crop"
    tv_graph_density: bool = False
    eval_dims: tuple = (64, 64, 64)
    confidence: float = 0.999

    def __post_init__(self):
        for name in ("lr_position", "lr_density", "lr_scale", "lr_rotation"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if not 0 < self.decay_floor_fraction <= 1:
            raise InvalidParameterError("decay_floor_fraction must lie in (0, 1]")
        if int(self.max_iters) < 0:
            raise InvalidParameterError("max_iters must be >= 0")
        if int(self.adc_interval) < 1:
            raise InvalidParameterError("adc_interval must be >= 1")
        if int(self.stop_check_interval) < 1:
            raise InvalidParameterError("stop_check_interval must be >= 1")
        if not 0 <= self.stop_drop_fraction < 1:
            raise InvalidParameterError("stop_drop_fraction must lie in [0, 1)")
        if not self.tau_pos >= 0 or not self.lambda_g >= 0:
            raise InvalidParameterError("tau_pos and lambda_g must be >= 0")
        if not self.prune_rho_min >= 0 or not self.split_scale_threshold > 0:
            raise InvalidParameterError("prune_rho_min must be >= 0, split_scale_threshold > 0")
        if int(self.max_kernels) < 1:
            raise InvalidParameterError("max_kernels must be >= 1")
        if self.density_param not in DENSITY_PARAMS:
            raise InvalidParameterError(f"density_param must be one of {DENSITY_PARAMS}")
        if self.scale_param not in SCALE_PARAMS:
            raise InvalidParameterError(f"scale_param must be one of {SCALE_PARAMS}")
        if self.split_mode not in SPLIT_MODES:
            raise InvalidParameterError(f"split_mode must be one of {SPLIT_MODES}")
        if self.tv_mode not in TV_MODES:
            raise InvalidParameterError(f"tv_mode must be one of {TV_MODES}")
        dims = tuple(int(d) for d in self.eval_dims)
        if len(dims) != 3 or min(dims) < 2:
            raise InvalidParameterError("eval_dims must be three integers >= 2")
        object.__setattr__(self, "eval_dims", dims)
        if not 0 < self.confidence < 1:
            raise InvalidParameterError("confidence must lie in (0, 1)")

    @property
    def adc_stop(self):
        return int(0.5 * self.max_iters) if self.adc_end is None else int(self.adc_end)


def lr_at(iteration, max_iters, lr0, floor_fraction):
    """Exponential decay from ``lr0`` to ``floor_fraction * lr0`` over ``max_iters``."""
    if max_iters <= 0:
        return lr0
    if not 0 <= iteration <= max_iters:
        raise InvalidParameterError("iteration must lie in [0, max_iters]")
    return lr0 * floor_fraction ** (iteration / max_iters)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    """First and second moments plus a per-row step count."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros_like(cls, param):
        param = np.asarray(param)
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64),
                   np.zeros(param.shape[0], dtype=np.int64))

    def take(self, idx):
        return AdamState(self.m[idx], self.v[idx], self.t[idx])

    def extend(self, n_new):
        shape = (n_new,) + self.m.shape[1:]
        return AdamState(np.concatenate([self.m, np.zeros(shape)]),
                         np.concatenate([self.v, np.zeros(shape)]),
                         np.concatenate([self.t, np.zeros(n_new, dtype=np.int64)]))


def adam_step(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-15):
    """One bias-corrected Adam update, row by row.

    Rows whose gradient is not finite are left untouched, state included.
    Returns ``(new_param, new_state, skipped_rows)``.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise InvalidParameterError("parameter, gradient and state shapes differ")
    rows = grad.reshape(grad.shape[0], -1)
    ok = np.all(np.isfinite(rows), axis=1)
    skipped = np.flatnonzero(~ok)
    if skipped.size:
        log.warning("skipping %d kernels with non-finite gradients", skipped.size)
    mask = ok.reshape((-1,) + (1,) * (param.ndim - 1))
    g = np.where(mask, grad, 0.0)
    m = np.where(mask, beta1 * state.m + (1 - beta1) * g, state.m)
    v = np.where(mask, beta2 * state.v + (1 - beta2) * g * g, state.v)
    t = state.t + ok
    tt = np.maximum(t, 1).reshape(mask.shape).astype(np.float64)
    m_hat = m / (1 - beta1 ** tt)
    v_hat = v / (1 - beta2 ** tt)
    step = np.where(mask, lr * m_hat / (np.sqrt(v_hat) + eps), 0.0)
    return param - step, AdamState(m, v, t), skipped


def project_parameters(rho, position, scale, rotation, bbox):
    """Feasibility projections applied after every optimizer step."""
    rho = np.maximum(rho, 0.0)
    scale = np.maximum(scale, SCALE_FLOOR)
    rotation = normalize_quaternions(rotation)
    position = np.clip(position, bbox[0], bbox[1])
    return rho, position, scale, rotation


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.maximum(y, 1e-12)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ParameterSet:
    """Raw optimizer variables for a cloud and their Adam states.

    Densities may live in softplus space and scales in log space; gradients
    arriving with respect to the physical values are converted here.
    """

    def __init__(self, cloud: GaussianCloud, cfg: TrainConfig):
        self.cfg = cfg
        self.bbox = cloud.bbox
        self.raw = self._to_raw(cloud.rho, cloud.position, cloud.scale, cloud.rotation)
        self.state = {k: AdamState.zeros_like(v) for k, v in self.raw.items()}

    def _to_raw(self, rho, position, scale, rotation):
        rho = np.asarray(rho, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        return {
            "rho": _softplus_inv(rho) if self.cfg.density_param == "softplus" else rho.copy(),
            "position": np.array(position, dtype=np.float64),
            "scale": np.log(scale) if self.cfg.scale_param == "log" else scale.copy(),
            "rotation": np.array(rotation, dtype=np.float64),
        }

    def physical(self):
        r = self.raw
        rho = _softplus(r["rho"]) if self.cfg.density_param == "softplus" else r["rho"]
        scale = np.exp(r["scale"]) if self.cfg.scale_param == "log" else r["scale"]
        return rho, r["position"], scale, r["rotation"]

    def cloud(self):
        rho, pos, scale, rot = self.physical()
        return GaussianCloud(rho, pos, np.maximum(scale, SCALE_FLOOR), rot, self.bbox)

    def __len__(self):
        return self.raw["rho"].shape[0]

    def step(self, grads: KernelGradients, lrs):
        r = self.raw
        g_rho = grads.d_rho
        if self.cfg.density_param == "softplus":
            g_rho = g_rho * _sigmoid(r["rho"])
        g_scale = grads.d_scale
        if self.cfg.scale_param == "log":
            g_scale = g_scale * np.exp(r["scale"])
        pairs = {"rho": g_rho, "position": grads.d_position, "scale": g_scale,
                 "rotation": grads.d_rotation}
        for name, g in pairs.items():
            r[name], self.state[name], _ = adam_step(r[name], g, self.state[name], lrs[name])
        if self.cfg.density_param == "direct":
            r["rho"] = np.maximum(r["rho"], 0.0)
        if self.cfg.scale_param == "log":
            r["scale"] = np.maximum(r["scale"], math.log(SCALE_FLOOR))
        else:
            r["scale"] = np.maximum(r["scale"], SCALE_FLOOR)
        r["rotation"] = normalize_quaternions(r["rotation"])
        r["position"] = np.clip(r["position"], self.bbox[0], self.bbox[1])

    def rescale_density(self, factor):
        rho = self.physical()[0] * factor
        self.raw["rho"] = _softplus_inv(rho) if self.cfg.density_param == "softplus" else rho

    def rebuild(self, keep_idx, new_cloud: GaussianCloud | None):
        """Keep rows ``keep_idx`` (with their Adam state), then append fresh kernels."""
        for name in self.raw:
            self.raw[name] = self.raw[name][keep_idx]
            self.state[name] = self.state[name].take(keep_idx)
        if new_cloud is not None and len(new_cloud):
            extra = self._to_raw(new_cloud.rho, new_cloud.position, new_cloud.scale,
                                 new_cloud.rotation)
            for name in self.raw:
                self.raw[name] = np.concatenate([self.raw[name], extra[name]])
                self.state[name] = self.state[name].extend(len(new_cloud))


# ----------------------------------------------------------------------------
# adaptive density control
# ----------------------------------------------------------------------------


@dataclass
class AdcState:
    grad_sum: np.ndarray
    view_count: np.ndarray
    graph_term: np.ndarray
    position_grad: np.ndarray

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros(m), np.zeros(m, dtype=np.int64), np.zeros(m), np.zeros((m, 3)))

    def averages(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.view_count > 0, self.grad_sum / np.maximum(self.view_count, 1),
                            0.0)


def pga_term(cloud: GaussianCloud, graph: KernelGraph | None, lambda_g, scaling_k):
    """Per-kernel ``lambda_g * sum_j |rho_i - rho_j| / k``."""
    if graph is None or lambda_g == 0 or len(cloud) == 0:
        return np.zeros(len(cloud))
    return lambda_g * density_difference_sums(cloud, graph) / scaling_k


def accumulate_adc(adc: AdcState, kernel_grads: KernelGradients, cloud: GaussianCloud,
                   graph: KernelGraph | None, lambda_g, scaling_k, per_view=True) -> AdcState:
    """Add one view's augmented positional-gradient norms to the running sums.

    Only kernels that contributed to the view are touched. With
    ``per_view=False`` the graph term is cached here and added once per kernel
    when averages are read at densification time.
    """
    hit = kernel_grads.contributed
    norm = np.linalg.norm(kernel_grads.d_ndc, axis=1)
    extra = pga_term(cloud, graph, lambda_g, scaling_k)
    inc = norm + extra if per_view else norm
    return AdcState(adc.grad_sum + np.where(hit, inc, 0.0),
                    adc.view_count + hit.astype(np.int64),
                    extra if not per_view else adc.graph_term,
                    adc.position_grad + np.where(hit[:, None], kernel_grads.d_position, 0.0))


@dataclass
class DensifyEvent:
    split: int = 0
    cloned: int = 0
    pruned: int = 0
    capped: int = 0
    kept_last: bool = False


@dataclass
class DensifyResult:
    """``cloud`` equals ``old.subset(keep_idx)`` followed by ``appended``.

    ``parents[k]`` is the index (in the old cloud) of appended kernel ``k``.
    """

    cloud: GaussianCloud
    keep_idx: np.ndarray
    appended: GaussianCloud | None
    parents: np.ndarray
    event: DensifyEvent
    kept_rho_factor: np.ndarray | None = None


def densify_and_prune(cloud: GaussianCloud, graph: KernelGraph | None, adc: AdcState,
                      cfg: TrainConfig, rng: np.random.Generator, lr_position=None):
    """Split, clone and prune according to averaged ADC statistics."""
    m = len(cloud)
    avg = adc.averages() + np.where(adc.view_count > 0, adc.graph_term, 0.0)
    selected = np.flatnonzero(avg > cfg.tau_pos)
    budget = max(0, int(cfg.max_kernels) - m)
    event = DensifyEvent()
    if selected.size > budget:
        # largest averages first when the cap binds
        order = np.argsort(-avg[selected], kind="stable")
        event.capped = int(selected.size - budget)
        selected = np.sort(selected[order[:budget]])
    extent = float(np.max(cloud.bbox[1] - cloud.bbox[0]))
    big = cloud.scale.max(axis=1) > cfg.split_scale_threshold * extent
    split_idx = selected[big[selected]]
    clone_idx = selected[~big[selected]]
    if lr_position is None:
        lr_position = cfg.lr_position

    conserve = cfg.conserve_mass
    new_parts = []
    parents = []
    if split_idx.size:
        par = cloud.subset(split_idx)
        kids = (_split_sampled(par, rng, conserve) if cfg.split_mode == "sample"
                else _split_principal(par, conserve))
        new_parts.extend(k.replace(position=np.clip(k.position, cloud.bbox[0], cloud.bbox[1]))
                         for k in kids)
        parents.extend([split_idx, split_idx])
        event.split = int(split_idx.size)
    if clone_idx.size:
        par = cloud.subset(clone_idx)
        g = adc.position_grad[clone_idx]
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        dirn = np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
        pos = np.clip(par.position - lr_position * dirn, cloud.bbox[0], cloud.bbox[1])
        new_parts.append(par.replace(position=pos, rho=par.rho * (0.5 if conserve else 1.0)))
        parents.append(clone_idx)
        event.cloned = int(clone_idx.size)

    keep = np.ones(m, dtype=bool)
    keep[split_idx] = False
    appended = None
    for part in new_parts:
        appended = part if appended is None else appended.concat(part)

    # prune over survivors and newcomers alike
    keep &= cloud.rho >= cfg.prune_rho_min
    if appended is not None:
        app_keep = appended.rho >= cfg.prune_rho_min
    else:
        app_keep = np.zeros(0, dtype=bool)
    event.pruned = int(np.count_nonzero(~keep) - split_idx.size
                       + np.count_nonzero(~app_keep))
    if not keep.any() and not app_keep.any():
        # never empty the cloud: keep the densest kernel
        best = int(np.argmax(cloud.rho))
        keep[best] = True
        event.kept_last = True
        event.pruned -= 1
        log.warning("pruning would empty the cloud; kept kernel %d", best)
    keep_idx = np.flatnonzero(keep)
    parent_idx = np.concatenate(parents) if parents else np.zeros(0, dtype=np.int64)
    if appended is not None:
        kept = np.flatnonzero(app_keep)
        appended = appended.subset(kept)
        parent_idx = parent_idx[kept]
    factor = np.ones(m)
    if conserve:
        factor[clone_idx] = 0.5
    kept_factor = factor[keep_idx]
    new_cloud = cloud.subset(keep_idx)
    new_cloud = new_cloud.replace(rho=new_cloud.rho * kept_factor)
    if appended is not None and len(appended):
        new_cloud = new_cloud.concat(appended)
    return DensifyResult(new_cloud, keep_idx, appended, parent_idx.astype(np.int64), event,
                         kept_factor)


def _split_sampled(par: GaussianCloud, rng, conserve):
    """Two children drawn from the parent distribution, every axis shrunk by 1.6.

    With ``conserve`` the children share the parent's integral.
    """
    gain = 1.6 ** 3 / 2 if conserve else 1.0
    R = quat_to_rotmat(par.rotation)
    kids = []
    for _ in range(2):
        z = rng.standard_normal((len(par), 3)) * par.scale
        kids.append(par.replace(position=par.position + np.einsum("mij,mj->mi", R, z),
                                scale=par.scale / 1.6, rho=par.rho * gain))
    return kids


def _split_principal(par: GaussianCloud, conserve):
    """Two children on the major axis at +-sqrt(1 - 1/1.6^2) s_max, that axis shrunk by 1.6.

    The pair keeps the parent's mean and covariance; with ``conserve`` it
    also keeps the integral.
    """
    m = len(par)
    rows = np.arange(m)
    axis = np.argmax(par.scale, axis=1)
    s_max = par.scale[rows, axis]
    direction = quat_to_rotmat(par.rotation)[rows, :, axis]
    offset = math.sqrt(1 - 1 / 1.6 ** 2) * s_max[:, None] * direction
    scale = par.scale.copy()
    scale[rows, axis] /= 1.6
    rho = par.rho * (0.8 if conserve else 1.0)
    return [par.replace(position=par.position + sign * offset, scale=scale, rho=rho)
            for sign in (1.0, -1.0)]


def check_stop(psnr_history, drop_fraction=0.005):
    """True when the latest checkpoint PSNR fell by more than ``drop_fraction``.

    A drop of exactly ``drop_fraction`` continues; the comparison allows a
    relative slack of 1e-12 for decimal inputs such as 30.0 -> 29.85.
    """
    if len(psnr_history) < 2:
        return False
    prev = float(psnr_history[-2][1])
    last = float(psnr_history[-1][1])
    if not (math.isfinite(prev) and math.isfinite(last)):
        return False
    return last < prev * (1.0 - drop_fraction) - 1e-12 * abs(prev)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


@dataclass
class MetricsRow:
    iter: int
    l1: float
    dssim: float
    tv: float
    lap: float
    total: float
    psnr_3d: float | None
    kernel_count: int
    elapsed_seconds: float


METRICS_FIELDS = ("iter", "l1", "dssim", "tv", "lap", "total", "psnr_3d", "kernel_count",
                  "elapsed_seconds")


@dataclass
class TrainResult:
    cloud: GaussianCloud
    graph: KernelGraph | None
    log: list = field(default_factory=list)
    psnr_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    stopped_early: bool = False
    density_scale: float = 1.0


def eval_grid(cloud_bbox, dims):
    dims = tuple(int(d) for d in dims)
    lo, hi = np.asarray(cloud_bbox[0]), np.asarray(cloud_bbox[1])
    spacing = (hi - lo) / np.array(dims)
    origin = lo + 0.5 * spacing
    return dims, spacing, origin


def calibrated_scale(cloud, measured: ProjectionStack, graph, rcfg, rays):
    """Least-squares factor matching rendered to measured projections."""
    num = den = 0.0
    for v in range(measured.geometry.num_views):
        img = render_view(cloud, measured.geometry, v, graph, rcfg, rays[v])
        num += float(np.sum(img * measured.images[v]))
        den += float(np.sum(img * img))
    return num / den if den > 0 else 1.0


def measured_psnr(cloud, measured, graph, rcfg, rays):
    peak = float(measured.images.max())
    err = 0.0
    for v in range(measured.geometry.num_views):
        img = render_view(cloud, measured.geometry, v, graph, rcfg, rays[v])
        err += float(np.sum((img - measured.images[v]) ** 2))
    mse = err / measured.images.size
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)


def train(measured: ProjectionStack, init: GaussianCloud, cfg: TrainConfig = TrainConfig(),
          graph_cfg: GraphConfig = GraphConfig(), weights: LossWeights = LossWeights(),
          reference: DenseVolume | None = None, voxel_cfg: VoxelizeConfig | None = None,
          callback=None) -> TrainResult:
    """Fit ``init`` to ``measured`` and return the final cloud with its metrics log.

    ``reference`` switches the stopping rule to 3-D PSNR against it;
    otherwise PSNR of re-rendered projections is monitored.
    """
    t_start = time.perf_counter()
    geo = measured.geometry
    rng = np.random.default_rng(cfg.seed)
    rcfg = RenderConfig(confidence=cfg.confidence)
    vcfg = voxel_cfg or VoxelizeConfig(confidence=cfg.confidence)
    tv_vcfg = replace(vcfg, use_graph_density=cfg.tv_graph_density)
    rays = all_view_rays(geo)
    data_range = float(measured.images.max()) or 1.0

    if reference is not None:
        e_dims, e_spacing, e_origin = reference.dims, reference.spacing, reference.origin
    else:
        e_dims, e_spacing, e_origin = eval_grid(init.bbox, cfg.eval_dims)

    def build_graph(c):
        return graph_for_cloud(c, graph_cfg) if len(c) >= 2 else KernelGraph.edgeless(
            len(c), graph_cfg.scaling_k)

    cloud = init
    graph = build_graph(cloud)
    result = TrainResult(cloud, graph)
    if cfg.max_iters == 0 or len(init) == 0:
        return result

    rgraph = graph if cfg.graph_density_in_render else None
    if cfg.calibrate_density:
        alpha = calibrated_scale(cloud, measured, rgraph, rcfg, rays)
        if alpha > 0 and math.isfinite(alpha):
            cloud = cloud.replace(rho=cloud.rho * alpha)
            result.density_scale = alpha
    params = ParameterSet(cloud, cfg)
    adc = AdcState.zeros(len(params))
    order = rng.permutation(geo.num_views)

    def evaluate(c, g):
        rg = g if cfg.graph_density_in_render else None
        if reference is not None:
            vol = voxelize(c, g, e_dims, e_spacing, e_origin,
                           replace(vcfg, use_graph_density=rg is not None))
            return psnr_3d(vol, reference)
        return measured_psnr(c, measured, rg, rcfg, rays)

    for it in range(cfg.max_iters):
        pos_in_epoch = it % geo.num_views
        if pos_in_epoch == 0 and it > 0:
            order = rng.permutation(geo.num_views)
        view = int(order[pos_in_epoch])
        cloud = params.cloud()
        rgraph = graph if cfg.graph_density_in_render else None

        rendered = render_view(cloud, geo, view, rgraph, rcfg, rays[view])
        crop = None
        if weights.lambda_tv > 0:
            c_dims, c_spacing, c_origin = _tv_grid(cfg, weights, e_dims, e_spacing, e_origin,
                                                   cloud.bbox, rng)
            crop = voxelize(cloud, graph, c_dims, c_spacing, c_origin, tv_vcfg)
        terms, lg = total_loss(rendered, measured.images[view], crop, cloud, graph, weights,
                               data_range)
        if not math.isfinite(terms.total):
            raise NonFiniteLossError("non-finite loss", it, {
                "view": view, "terms": terms, "kernel_count": len(cloud),
                "rho_range": (float(cloud.rho.min()), float(cloud.rho.max())),
                "scale_range": (float(cloud.scale.min()), float(cloud.scale.max()))})

        grads = render_backward(cloud, geo, view, lg.d_image, rgraph, rcfg, rays[view])
        if crop is not None:
            grads = grads + voxelize_backward(cloud, graph, c_dims, c_spacing, c_origin,
                                              lg.d_voxels, tv_vcfg)
        if lg.d_rho_direct is not None:
            grads.d_rho = grads.d_rho + lg.d_rho_direct

        in_window = cfg.adc_start <= it < cfg.adc_stop
        if in_window:
            adc = accumulate_adc(adc, grads, cloud, graph, cfg.lambda_g,
                                 graph_cfg.scaling_k, cfg.pga_per_view)

        lrs = {
            "rho": lr_at(it, cfg.max_iters, cfg.lr_density, cfg.decay_floor_fraction),
            "position": lr_at(it, cfg.max_iters, cfg.lr_position, cfg.decay_floor_fraction),
            "scale": lr_at(it, cfg.max_iters, cfg.lr_scale, cfg.decay_floor_fraction),
            "rotation": lr_at(it, cfg.max_iters, cfg.lr_rotation, cfg.decay_floor_fraction),
        }
        params.step(grads, lrs)

        done = it + 1
        if done % cfg.adc_interval == 0:
            cloud = params.cloud()
            mult = _multipliers(cloud, graph) if rgraph is not None else None
            if in_window:
                dres = densify_and_prune(cloud, graph, adc, cfg, rng, lrs["position"])
                params.rebuild(dres.keep_idx, dres.appended)
                n_app = len(params) - dres.keep_idx.size
                params.rescale_density(np.concatenate([dres.kept_rho_factor, np.ones(n_app)]))
                result.events.append((done, dres.event))
                adc = AdcState.zeros(len(params))
                if mult is not None:
                    mult = np.concatenate([mult[dres.keep_idx], mult[dres.parents]])
                cloud = params.cloud()
            graph = build_graph(cloud)
            if mult is not None and cfg.preserve_density_on_rebuild:
                # keep every kernel's effective density across the neighbourhood change
                params.rescale_density(mult / _multipliers(cloud, graph))

        psnr = None
        if done % cfg.stop_check_interval == 0:
            cloud = params.cloud()
            psnr = evaluate(cloud, graph)
            result.psnr_history.append((done, psnr))
        row = MetricsRow(done, terms.l1, terms.dssim, terms.tv, terms.lap, terms.total, psnr,
                         len(params), time.perf_counter() - t_start)
        result.log.append(row)
        if callback is not None:
            callback(row)
        if psnr is not None and check_stop(result.psnr_history, cfg.stop_drop_fraction):
            result.stopped_early = True
            log.info("stopping at iteration %d: PSNR fell from %.4f to %.4f", done,
                     result.psnr_history[-2][1], psnr)
            break

    result.cloud = params.cloud()
    if len(result.cloud) != (graph.num_nodes if graph is not None else 0):
        graph = build_graph(result.cloud)
    result.graph = graph
    return result


def _multipliers(cloud, graph):
    _, aux = effective_density(cloud, graph)
    return aux[0] if aux is not None else np.ones(len(cloud))


def _tv_grid(cfg, weights, e_dims, e_spacing, e_origin, bbox, rng):
    d = int(weights.tv_crop_d)
    if cfg.tv_mode == "downsample":
        return eval_grid(bbox, (d, d, d))
    dims = tuple(min(d, n) for n in e_dims)
    off = np.array([rng.integers(0, n - c + 1) for n, c in zip(e_dims, dims)])
    return dims, e_spacing, e_origin + off * e_spacing
