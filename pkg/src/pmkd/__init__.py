"""Pacemaker knowledge distillation and single-row streaming inference
for on-the-fly 1xN convolutional networks."""

from .config import RunConfig, load_config
from .data import AugmentPolicy, DatasetContainer, import_cifar, minibatches
from .distill import (
    DistillConfig,
    Ensemble,
    PhaseReport,
    ensemble_forward,
    forward_with_taps,
    loss_fkd,
    loss_lkd,
    run_phase,
    run_pipeline,
    total_loss,
    transplant_weights,
)
from .models import ArchSpec, Model, build, init_weights, param_count, tap_points
from .optim import SGD, lr_at_epoch
from .stream import StreamState, equivalence_check, fold_batchnorm, plan_stream
from .tensor import ConvGeometry, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "AugmentPolicy", "ConvGeometry", "DatasetContainer",
    "DistillConfig", "Ensemble", "Model", "PhaseReport", "RunConfig", "SGD",
    "StreamState", "Tape", "Tensor", "backward", "build", "ensemble_forward",
    "equivalence_check", "fold_batchnorm", "forward_with_taps", "import_cifar",
    "init_weights", "load_config", "loss_fkd", "loss_lkd", "lr_at_epoch",
    "minibatches", "param_count", "plan_stream", "run_phase", "run_pipeline",
    "tap_points", "total_loss", "transplant_weights",
]
