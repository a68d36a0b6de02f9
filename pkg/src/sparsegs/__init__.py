"""Sparse-view planar Gaussian splatting on the CPU."""
from .core import Camera, GaussianCloud, TrainConfig
from .errors import SparseGSError
from .losses import normal_loss, pearson_depth_loss, photometric_loss, scale_loss, total_loss
from .metrics import eval_report, psnr, ssim
from .optim import TrainState, gradcheck, init_from_points, train
from .raster import RenderGrads, RenderOutput, project, render, render_backward, render_bruteforce

__all__ = [
    "Camera",
    "GaussianCloud",
    "RenderGrads",
    "RenderOutput",
    "SparseGSError",
    "TrainConfig",
    "TrainState",
    "eval_report",
    "gradcheck",
    "init_from_points",
    "normal_loss",
    "pearson_depth_loss",
    "photometric_loss",
    "project",
    "psnr",
    "render",
    "render_backward",
    "render_bruteforce",
    "scale_loss",
    "ssim",
    "total_loss",
    "train",
]
