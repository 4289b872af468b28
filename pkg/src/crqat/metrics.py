"""Training diagnostics: oscillation counting, weight-histogram entropy,
and accuracy evaluation.

Oscillation is measured on the integer quantization levels of tracked latent
weights: a flip is a direction reversal between consecutive level changes.
Entropy histograms each conv kernel's latent weights into 70 equal-width bins
spanning that kernel's own range and reports bits (base 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .data import Dataset, normalize_images
from .errors import UsageError
from .models import ModelState

ENTROPY_BINS = 70


@dataclass
class WeightTrace:
    """Integer-level history of one tracked latent weight."""

    site: str
    levels: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)


def oscillation_count(trace) -> int:
    """Number of direction reversals in a level sequence.

    A reversal at index i needs both steps (i-2 -> i-1 and i-1 -> i) to move,
    in opposite directions. Plateaus between moves do not count.
    """
    levels = trace.levels if isinstance(trace, WeightTrace) else np.asarray(trace)
    if levels.ndim != 1:
        raise UsageError(f"trace must be 1-d, got shape {levels.shape}")
    if len(levels) < 2:
        raise UsageError(f"trace needs at least 2 entries, got {len(levels)}")
    steps = np.sign(np.diff(levels))
    return int(np.sum((steps[1:] != 0) & (steps[:-1] != 0) & (steps[1:] == -steps[:-1])))


def total_oscillations(levels_2d: np.ndarray) -> int:
    """Sum of :func:`oscillation_count` over the columns of [iters, sites]."""
    levels_2d = np.asarray(levels_2d)
    if levels_2d.ndim != 2 or levels_2d.shape[0] < 2:
        raise UsageError(
            f"need a [iterations, sites] array with >= 2 rows, got {levels_2d.shape}"
        )
    return sum(oscillation_count(levels_2d[:, j]) for j in range(levels_2d.shape[1]))


@dataclass
class KernelEntropy:
    layer: str
    channel: int
    entropy: float
    degenerate: bool = False


@dataclass
class EntropyReport:
    per_kernel: list = field(default_factory=list)
    bins: int = ENTROPY_BINS

    @property
    def total(self) -> float:
        return float(sum(k.entropy for k in self.per_kernel))


def _histogram_entropy(values: np.ndarray, bins: int) -> tuple[float, bool]:
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return 0.0, True
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()), False


def weight_entropy(model: ModelState, bins: int = ENTROPY_BINS) -> EntropyReport:
    """Per-kernel histogram entropy of conv latent weights, plus the total.

    One kernel is one output channel of one conv layer; its histogram spans
    that kernel's own [min, max]. A constant kernel records entropy 0 with a
    degenerate flag.
    """
    convs = model.conv_layers()
    if not convs:
        raise UsageError(f"model '{model.arch}' has no conv layers")
    report = EntropyReport(bins=bins)
    for layer in convs:
        w = layer.weight.data
        for channel in range(w.shape[0]):
            h, degenerate = _histogram_entropy(w[channel].reshape(-1), bins)
            report.per_kernel.append(
                KernelEntropy(layer.name, channel, h, degenerate)
            )
    return report


def predict_logits(model: ModelState, images: np.ndarray, mean, std,
                   batch_size: int = 256, quantize: bool = True) -> np.ndarray:
    autodiff.tune_allocator()
    out = []
    with autodiff.no_grad():
        for start in range(0, len(images), batch_size):
            x = normalize_images(images[start : start + batch_size], mean, std)
            out.append(model.forward(x, quantize=quantize).data)
    return np.concatenate(out)


def evaluate_accuracy(model: ModelState, dataset: Dataset, n_samples: int | None = None,
                      seed: int = 0, batch_size: int = 256,
                      quantize: bool = True) -> float:
    """Top-1 accuracy (%) on a seeded without-replacement sample."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise UsageError("evaluation dataset carries no labels")
    if n_samples is None:
        n_samples = len(dataset)
    if n_samples > len(dataset):
        raise UsageError(
            f"requested {n_samples} evaluation samples from {len(dataset)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))[:n_samples]
    images = dataset.images[idx]
    labels = dataset.labels[idx]
    logits = predict_logits(model, images, dataset.channel_mean,
                            dataset.channel_std, batch_size, quantize)
    correct = (logits.argmax(axis=1) == labels).sum()
    return 100.0 * float(correct) / n_samples
