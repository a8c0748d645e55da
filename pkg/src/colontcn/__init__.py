"""Temporal segmentation of colonoscopy procedures from per-frame features."""

from colontcn import _backend
from colontcn.data import FeatureSequence, LabelClass, SyntheticSpec, generate_synthetic
from colontcn.loss import LossConfig, combined_loss
from colontcn.metrics import MetricsReport, evaluate
from colontcn.model import ModelConfig, count_params, estimate_flops, init_params, receptive_field
from colontcn.train import FoldSpec, OptimConfig, run_cv, train_loop

__version__ = "0.1.0"

__all__ = [
    "FeatureSequence", "FoldSpec", "LabelClass", "LossConfig", "MetricsReport", "ModelConfig",
    "OptimConfig", "SyntheticSpec", "combined_loss", "count_params", "estimate_flops", "evaluate",
    "generate_synthetic", "init_params", "receptive_field", "run_cv", "train_loop",
]


def kernel_backend():
    """Name of the active convolution kernel backend ('compiled' or 'numpy')."""
    return _backend.name
