"""Monocular depth estimation at desk scale, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .datapipe import SamplePair, depth_to_color, load_colormap, synth_dataset
from .losses import LossBreakdown, LossWeights, composite_loss
from .metrics import MetricsReport, report
from .network import DepthModel, ModelConfig, load_checkpoint, save_checkpoint
from .optimization import Adam, TrainConfig, evaluate, train, tune_weights
from .tensor import ContractError, DimensionError, NumericError, Tensor, backward, gradcheck, no_grad

__all__ = [
    "Adam",
    "ContractError",
    "DepthModel",
    "DimensionError",
    "LossBreakdown",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "NumericError",
    "SamplePair",
    "Tensor",
    "TrainConfig",
    "backward",
    "composite_loss",
    "depth_to_color",
    "evaluate",
    "gradcheck",
    "load_checkpoint",
    "load_colormap",
    "no_grad",
    "report",
    "save_checkpoint",
    "synth_dataset",
    "train",
    "tune_weights",
]
