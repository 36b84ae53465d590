"""Superpixel-attention segmentation of dermoscopic attributes at desk scale.

A small numpy autodiff core, SLIC superpixels, superpixel pooling and
attention, neighborhood-constrained block shuffling, truncated balanced
losses and the metrics, data and training plumbing around them.
"""

from .errors import (
    ConfigurationError,
    FormatError,
    NonFiniteError,
    TrainingDivergedError,
    UninitializedStatisticsError,
    UnsupportedVariantError,
)
from .losses import LossConfig, gbcel, gbjal, jal, total_loss
from .metrics import CLASS_NAMES, MetricReport, aggregate
from .model import ModelConfig, ToySANet, build_toy_sanet
from .superpixel import SuperpixelMap, slic_segment, sp_avg_pool, sp_unpool, validate_map
from .tensor import Graph, Parameter, Tensor, grad_check
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfigurationError",
    "FormatError",
    "Graph",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "NonFiniteError",
    "Parameter",
    "SuperpixelMap",
    "Tensor",
    "ToySANet",
    "TrainConfig",
    "TrainingDivergedError",
    "UninitializedStatisticsError",
    "UnsupportedVariantError",
    "aggregate",
    "build_toy_sanet",
    "evaluate",
    "gbcel",
    "gbjal",
    "grad_check",
    "jal",
    "slic_segment",
    "sp_avg_pool",
    "sp_unpool",
    "total_loss",
    "train",
    "validate_map",
]
