"""Consistency-regularized quantization-aware training for small image classifiers."""

from .augmentation import AugmentationPolicy, augment_two_views
from .autodiff import Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, load_cifar10, make_synthetic, sample_calibration, split_labeled
from .estimator import QATImageClassifier
from .metrics import evaluate_accuracy, oscillation_count, weight_entropy
from .models import ModelState, build_model, calibrate_model, copy_into_teacher
from .quantization import MinMaxObserver, QuantSpec, calibrate, fake_quantize
from .runner import run_experiment, run_single
from .training import (
    TrainConfig,
    TrainData,
    cr_loss,
    ema_update,
    lambda_schedule,
    total_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "Dataset",
    "MinMaxObserver",
    "ModelState",
    "QATImageClassifier",
    "QuantSpec",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "TrainData",
    "augment_two_views",
    "backward",
    "build_model",
    "calibrate",
    "calibrate_model",
    "copy_into_teacher",
    "cr_loss",
    "ema_update",
    "evaluate_accuracy",
    "fake_quantize",
    "lambda_schedule",
    "load_checkpoint",
    "load_cifar10",
    "load_config",
    "make_synthetic",
    "no_grad",
    "oscillation_count",
    "run_experiment",
    "run_single",
    "sample_calibration",
    "save_checkpoint",
    "split_labeled",
    "total_loss",
    "train",
    "weight_entropy",
    "__version__",
]
