"""Few-view Gaussian splatting with guided score distillation from a diffusion prior."""
import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from ._validation import TrainingAbort, ValidationError  # noqa: E402
from .diffusion import AnalyticGaussianDenoiser, ddim_invert, make_schedule, predict_analytic  # noqa: E402
from .distillation import gsd_gradient, sds_ddim_gradient, sds_gradient, total_loss  # noqa: E402
from .estimator import GaussianSplatReconstructor  # noqa: E402
from .experiment import ExperimentConfig, run_ablation, run_experiment  # noqa: E402
from .guidance import GuidanceSpec, correct_noise, pcc, warp_depth  # noqa: E402
from .rasterizer import rasterize, render, render_backward  # noqa: E402
from .scene import Camera, GaussianCloud, interpolate_trajectory  # noqa: E402
from .synthetic import make_synthetic_scene  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianDenoiser",
    "Camera",
    "ExperimentConfig",
    "GaussianCloud",
    "GaussianSplatReconstructor",
    "GuidanceSpec",
    "TrainConfig",
    "TrainingAbort",
    "ValidationError",
    "correct_noise",
    "ddim_invert",
    "gsd_gradient",
    "interpolate_trajectory",
    "make_schedule",
    "make_synthetic_scene",
    "pcc",
    "predict_analytic",
    "rasterize",
    "render",
    "render_backward",
    "run_ablation",
    "run_experiment",
    "sds_ddim_gradient",
    "sds_gradient",
    "total_loss",
    "train",
    "warp_depth",
]
