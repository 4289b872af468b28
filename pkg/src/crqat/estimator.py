"""Scikit-learn estimator facade over the quantization-aware trainer.

``QATImageClassifier`` wraps calibration, consistency-regularized training,
and quantized inference behind the standard fit/predict/predict_proba/score
surface, so the model drops into pipelines, ``clone``, and grid search.
Rows labeled ``-1`` in ``y`` are treated as unlabeled and feed only the
consistency term, mirroring scikit-learn's semi-supervised convention.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .augmentation import AugmentationPolicy
from .data import Dataset, normalize_images
from .errors import UsageError
from .metrics import predict_logits
from .models import build_model, calibrate_model
from .runner import derive_seed
from .training import TrainConfig, TrainData, train

_IMAGE_SHAPE = (3, 32, 32)
_FLAT_DIM = int(np.prod(_IMAGE_SHAPE))


def _as_images(X) -> np.ndarray:
    """Accept [N, 3, 32, 32] images or their [N, 3072] flattening."""
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 2 and X.shape[1] == _FLAT_DIM:
        X = X.reshape(-1, *_IMAGE_SHAPE)
    if X.ndim != 4 or X.shape[1:] != _IMAGE_SHAPE:
        raise UsageError(
            f"X must be [N, 3, 32, 32] images or [N, {_FLAT_DIM}] rows, "
            f"got {X.shape}"
        )
    if X.min() < -1e-6 or X.max() > 1.0 + 1e-6:
        raise UsageError("image values must lie in [0, 1]")
    return np.clip(X, 0.0, 1.0)


class QATImageClassifier(ClassifierMixin, BaseEstimator):
    """Low-bit image classifier trained with an EMA teacher and two-view
    consistency.

    Parameters mirror the training config; ``use_teacher`` selects which of
    the two returned networks serves predictions. ``y == -1`` marks unlabeled
    rows.
    """

    def __init__(self, arch="tinycnn", wbits=4, abits=4, epochs=10,
                 batch_size=64, ratio="1:7", base_lr=0.01, momentum=0.9,
                 weight_decay=5e-4, cr_strength=1.0, warmup_epochs=4,
                 ema_momentum=0.99, divergence="mse", calibration_size=100,
                 flip_prob=0.5, translate_px=4, jitter=0.4,
                 use_teacher=True, random_state=0):
        self.arch = arch
        self.wbits = wbits
        self.abits = abits
        self.epochs = epochs
        self.batch_size = batch_size
        self.ratio = ratio
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.cr_strength = cr_strength
        self.warmup_epochs = warmup_epochs
        self.ema_momentum = ema_momentum
        self.divergence = divergence
        self.calibration_size = calibration_size
        self.flip_prob = flip_prob
        self.translate_px = translate_px
        self.jitter = jitter
        self.use_teacher = use_teacher
        self.random_state = random_state

    # -- sklearn interface ---------------------------------------------------

    def fit(self, X, y):
        images = _as_images(X)
        y = np.asarray(y)
        if y.shape != (len(images),):
            raise UsageError(f"y has shape {y.shape}, expected ({len(images)},)")

        unlabeled_mask = y == -1
        labeled_y = y[~unlabeled_mask]
        if labeled_y.size == 0:
            raise UsageError("fit needs at least one labeled row (y != -1)")
        self.classes_ = np.unique(labeled_y)
        class_index = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([class_index[c] for c in labeled_y], dtype=np.int64)

        mean = images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        std = np.maximum(
            images.std(axis=(0, 2, 3), dtype=np.float64), 1e-6
        ).astype(np.float32)
        self.channel_mean_, self.channel_std_ = mean, std

        labeled = Dataset(images[~unlabeled_mask], encoded, "train", mean, std,
                          len(self.classes_))
        pool_images = images[unlabeled_mask] if unlabeled_mask.any() else None

        ratio_l, ratio_u = (int(p) for p in self.ratio.split(":"))
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            labeled_ratio=ratio_l, unlabeled_ratio=ratio_u,
            base_lr=self.base_lr, momentum=self.momentum,
            weight_decay=self.weight_decay, ema_momentum=self.ema_momentum,
            cr_strength=self.cr_strength, warmup_epochs=self.warmup_epochs,
            divergence=self.divergence, seed=self.random_state,
        )
        model = build_model(self.arch, len(self.classes_), self.wbits,
                            self.abits, seed=self.random_state)
        rng = np.random.default_rng(derive_seed(self.random_state, 0xCAB))
        calib_n = min(self.calibration_size, len(images))
        calib = images[rng.permutation(len(images))[:calib_n]]
        calibrate_model(model, normalize_images(calib, mean, std))

        policy = AugmentationPolicy(
            flip_prob=self.flip_prob, translate_px=self.translate_px,
            jitter=self.jitter, seed=derive_seed(self.random_state, 0xA06),
        )
        result = train(model, cfg, TrainData(labeled, pool_images, policy))
        self.student_ = result.student
        self.teacher_ = result.teacher
        self.records_ = result.records
        self.n_features_in_ = _FLAT_DIM
        return self

    def _model(self):
        if not hasattr(self, "student_"):
            raise NotFittedError(
                "this QATImageClassifier instance is not fitted yet"
            )
        return self.teacher_ if self.use_teacher else self.student_

    def decision_function(self, X) -> np.ndarray:
        images = _as_images(X)
        return predict_logits(self._model(), images, self.channel_mean_,
                              self.channel_std_)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]
