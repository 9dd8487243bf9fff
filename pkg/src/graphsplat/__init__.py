"""Sparse-view CT reconstruction with graph-coupled radiative Gaussians."""
from .backend import active as active_backend
from .config import RunConfig, load_config
from .core import DenseVolume, GaussianCloud, GaussianKernel, KernelGraph, ProjectionStack, ScanGeometry
from .errors import (ConfigError, GraphSplatError, InvalidParameterError, NonFiniteLossError,
                     ParseError)
from .fbp import InitConfig, fdk_reconstruct, gaussian_filter_volume, init_point_cloud
from .graph import GraphConfig, build_mutual_knn, laplacian_energy
from .losses import LossWeights, total_loss
from .metrics import psnr_3d, ssim_slices
from .phantom import NoiseSpec, PhantomSpec, add_noise, desk_geometry, make_phantom, project_volume
from .render import RenderConfig, render_backward, render_view
from .trainer import TrainConfig, TrainResult, train
from .voxelizer import VoxelizeConfig, voxelize, voxelize_backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DenseVolume", "GaussianCloud", "GaussianKernel", "GraphConfig",
    "GraphSplatError", "InitConfig", "InvalidParameterError", "KernelGraph", "LossWeights",
    "NoiseSpec", "NonFiniteLossError", "ParseError", "PhantomSpec", "ProjectionStack",
    "RenderConfig", "RunConfig", "ScanGeometry", "TrainConfig", "TrainResult",
    "VoxelizeConfig", "active_backend", "add_noise", "build_mutual_knn", "desk_geometry",
    "fdk_reconstruct", "gaussian_filter_volume", "init_point_cloud", "laplacian_energy",
    "load_config", "make_phantom", "project_volume", "psnr_3d", "render_backward",
    "render_view", "ssim_slices", "total_loss", "train", "voxelize", "voxelize_backward",
]
