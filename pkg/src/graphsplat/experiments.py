"""End-to-end runs shared by the CLI and the acceptance suite.

``reconstruct`` goes projections -> FDK -> (optional denoise) -> kernel
cloud -> training -> voxelized volume. The ablation grid toggles the
denoising step and the graph term of the densification statistic.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, config_from_dict
from .core import DenseVolume, GaussianCloud, ProjectionStack
from .fbp import fdk_reconstruct, gaussian_filter_volume, init_point_cloud
from .metrics import psnr_3d, ssim_slices
from .phantom import NoiseSpec, PhantomSpec, add_noise, desk_geometry, make_phantom, project_volume
from .trainer import TrainResult, train
from .voxelizer import voxelize

ABLATION_FIELDS = ("deinit", "pga", "seed", "psnr", "ssim", "fdk_psnr", "kernel_count",
                   "iterations", "time_seconds")
SWEEP_FIELDS = ("parameter", "value", "seed", "psnr", "ssim", "kernel_count", "time_seconds")

# Desk-scale protocol: minutes per run on one core.
DESK_OVERRIDES = {
    "init": {"sigma_d": 1.0, "tau": 0.05, "num_points_m": 3000},
    "loss": {"lambda_tv": 0.5, "tv_crop_d": 16},
    "train": {"max_iters": 1500, "adc_start": 300, "adc_end": 750, "tau_pos": 3e-4,
              "split_mode": "principal", "max_kernels": 4000},
}
DESK_NOISE = {"photon_count_i0": 1e3, "electronic_sigma": 0.05}


def desk_config(**overrides) -> RunConfig:
    """The desk protocol as a run configuration; keyword overrides use config keys."""
    cfg = config_from_dict(DESK_OVERRIDES)
    return cfg.with_overrides(overrides) if overrides else cfg


def desk_scene(kind="ball", seed=0, dims=(64, 64, 64), views=25, detector=(64, 64),
               mode="parallel", noise=None):
    """Ground-truth phantom and its noisy projection stack for one seed."""
    gt = make_phantom(PhantomSpec(kind, dims, seed))
    clean = project_volume(gt, desk_geometry(mode, views, detector))
    return gt, add_noise(clean, NoiseSpec(seed=seed, **(noise or DESK_NOISE)))


def initial_cloud(stack: ProjectionStack, dims, cfg: RunConfig, deinit=True,
                  fdk: DenseVolume | None = None):
    """FDK volume, the volume the kernels are sampled from, and the cloud."""
    if fdk is None:
        fdk = fdk_reconstruct(stack, dims, window=cfg.init.window)
    source = (gaussian_filter_volume(fdk, cfg.init.sigma_d, cfg.init.radius_r)
              if deinit else fdk)
    return fdk, source, init_point_cloud(source, cfg.init, bbox=fdk.bbox())


def final_volume(result: TrainResult, like: DenseVolume, cfg: RunConfig) -> DenseVolume:
    vcfg = replace(cfg.voxelize, use_graph_density=(cfg.voxelize.use_graph_density
                                                    and cfg.train.graph_density_in_render))
    return voxelize(result.cloud, result.graph, like.dims, like.spacing, like.origin, vcfg)


@dataclass
class RunOutcome:
    volume: DenseVolume
    result: TrainResult
    psnr: float | None
    ssim: float | None
    seconds: float


def reconstruct(stack: ProjectionStack, init: GaussianCloud, cfg: RunConfig,
                reference: DenseVolume | None = None, like: DenseVolume | None = None,
                callback=None) -> RunOutcome:
    """Train from ``init`` and voxelize on the grid of ``reference`` (or ``like``)."""
    t0 = time.perf_counter()
    res = train(stack, init, cfg.train, cfg.graph, cfg.loss, reference=reference,
                voxel_cfg=cfg.voxelize, callback=callback)
    grid = reference if reference is not None else like
    if grid is None:
        raise ValueError("reconstruct needs a reference or a grid template")
    vol = final_volume(res, grid, cfg)
    psnr = ssim = None
    if reference is not None:
        psnr = psnr_3d(vol, reference)
        ssim = ssim_slices(vol, reference)
    return RunOutcome(vol, res, psnr, ssim, time.perf_counter() - t0)


def ablation_configs(cfg: RunConfig):
    """The 2x2 grid: ``(deinit, pga, config)`` with PGA off meaning lambda_g = 0."""
    out = []
    for deinit in (False, True):
        for pga in (False, True):
            tcfg = cfg.train if pga else replace(cfg.train, lambda_g=0.0)
            out.append((deinit, pga, replace(cfg, train=tcfg)))
    return out


def run_ablation(stack: ProjectionStack, reference: DenseVolume, cfg: RunConfig, seeds=(0,),
                 progress=None):
    """Rows for every (seed, De-Init, PGA) combination."""
    rows = []
    fdk = fdk_reconstruct(stack, reference.dims, reference.spacing, reference.origin,
                          window=cfg.init.window)
    fdk_psnr = psnr_3d(fdk, reference)
    for seed in seeds:
        for deinit, pga, c in ablation_configs(cfg):
            c = replace(c, train=replace(c.train, seed=int(seed)),
                        init=replace(c.init, seed=int(seed)))
            _, _, init = initial_cloud(stack, reference.dims, c, deinit, fdk=fdk)
            out = reconstruct(stack, init, c, reference)
            row = {"deinit": int(deinit), "pga": int(pga), "seed": int(seed), "psnr": out.psnr,
                   "ssim": out.ssim, "fdk_psnr": fdk_psnr,
                   "kernel_count": len(out.result.cloud),
                   "iterations": out.result.log[-1].iter if out.result.log else 0,
                   "time_seconds": out.seconds}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def run_sweep(stack: ProjectionStack, reference: DenseVolume, cfg: RunConfig, ks=(), sigmas=(),
              seed=0, progress=None):
    """One full run per neighbour count ``k`` and per filter width ``sigma_d``.

    Sweeping ``k`` changes both the neighbour count and the weight scale, as
    the two share a symbol.
    """
    rows = []
    fdk = fdk_reconstruct(stack, reference.dims, reference.spacing, reference.origin,
                          window=cfg.init.window)
    jobs = [("k", k, replace(cfg, graph=replace(cfg.graph, knn_k=int(k), scaling_k=float(k))))
            for k in ks]
    jobs += [("sigma_d", s, replace(cfg, init=replace(cfg.init, sigma_d=float(s))))
             for s in sigmas]
    for name, value, c in jobs:
        c = replace(c, train=replace(c.train, seed=int(seed)), init=replace(c.init, seed=int(seed)))
        _, _, init = initial_cloud(stack, reference.dims, c, True, fdk=fdk)
        out = reconstruct(stack, init, c, reference)
        row = {"parameter": name, "value": value, "seed": int(seed), "psnr": out.psnr,
               "ssim": out.ssim, "kernel_count": len(out.result.cloud),
               "time_seconds": out.seconds}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def ordering_holds(rows, seed):
    """Grid ordering for one seed: full >= each single component >= baseline."""
    p = {(r["deinit"], r["pga"]): r["psnr"] for r in rows if r["seed"] == seed}
    full, de, pg, base = p[(1, 1)], p[(1, 0)], p[(0, 1)], p[(0, 0)]
    return bool(full >= de >= base and full >= pg >= base)


def seeds_with_ordering(rows):
    seeds = sorted({r["seed"] for r in rows})
    return [s for s in seeds if ordering_holds(rows, s)]


def mean_psnr(rows, **match):
    vals = [r["psnr"] for r in rows if all(r[k] == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else float("nan")
