"""Lightweight deconvolution-head pose estimation on a small numpy autodiff core."""
from . import kernels
from .codec import KeypointSet, decode, gaussian_encode
from .config import ConfigError
from .cost import CostReport, count_instantiated, reduction_ratio
from .losses import heatmap_weighting_loss, mse_loss
from .metrics import EvalInstance, EvalResult, evaluate, oks, pckh
from .model import ModelConfig, PoseModel, build_model
from .tensor import Parameter, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CostReport", "EvalInstance", "EvalResult", "KeypointSet", "ModelConfig", "Parameter",
    "PoseModel", "ShapeError", "Tensor", "build_model", "count_instantiated", "decode", "evaluate",
    "gaussian_encode", "heatmap_weighting_loss", "kernels", "mse_loss", "no_grad", "oks", "pckh",
    "reduction_ratio",
]
