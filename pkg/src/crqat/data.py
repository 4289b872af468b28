"""Dataset ingestion and synthesis.

Three sources: the CIFAR-10 binary batch format, a procedural synthetic
dataset of colored shapes sized for desk-scale runs, and a small binary cache
format for the synthetic data. Images are [N, 3, 32, 32] float32 in [0, 1];
per-channel normalization constants are computed from the train split and
applied after augmentation, never baked into the stored images.
"""

from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, UsageError

IMAGE_SHAPE = (3, 32, 32)
_RECORD_BYTES = 1 + 3 * 32 * 32
CACHE_MAGIC = b"CRDS"
CACHE_VERSION = 1

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    """Immutable image classification split.

    ``labels`` is None for unlabeled pools (the label column is dropped, not
    hidden). ``channel_mean``/``channel_std`` are the normalization constants
    of the originating train split.
    """

    images: np.ndarray
    labels: np.ndarray | None
    split: str
    channel_mean: np.ndarray
    channel_std: np.ndarray
    num_classes: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise UsageError(
                f"images must be [N, 3, 32, 32], got {self.images.shape}"
            )
        if self.labels is not None and len(self.labels) != len(self.images):
            raise UsageError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )
        self.images.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    def with_normalization(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        return dataclasses.replace(self, channel_mean=mean, channel_std=std)

    def subset(self, indices: np.ndarray, split: str | None = None) -> "Dataset":
        return dataclasses.replace(
            self,
            images=self.images[indices],
            labels=None if self.labels is None else self.labels[indices],
            split=split or self.split,
            info={},
        )

    def drop_labels(self) -> "Dataset":
        return dataclasses.replace(self, labels=None, info={})


def normalize_images(images: np.ndarray, mean: np.ndarray,
                     std: np.ndarray) -> np.ndarray:
    """Per-channel standardization; returns a new float32 array."""
    out = (images - mean[:, None, None]) / std[:, None, None]
    return out.astype(np.float32)


def _channel_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(std, 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

_N_SHAPES = 5


def _shape_mask(kind: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if kind == 0:                                    # disc
        return dy * dy + dx * dx <= r * r
    if kind == 1:                                    # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.82 * r
    if kind == 2:                                    # triangle, apex up
        u = (dy + r) / (1.8 * r)
        return (u >= 0) & (u <= 1) & (np.abs(dx) <= u * 0.95 * r)
    if kind == 3:                                    # ring
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == 4:                                    # plus
        arm = 0.36 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ConfigError(f"unknown shape kind {kind}")


def _class_color(cls: int, classes: int, rng) -> np.ndarray:
    # adjacent full-width hue bands: samples near a band edge need precise
    # color resolution to classify, which is what low-bit activations erode
    n_bands = max(1, int(np.ceil(classes / _N_SHAPES)))
    band = cls // _N_SHAPES
    hue = float(rng.uniform(band / n_bands, (band + 1) / n_bands)) % 1.0
    sat = float(rng.uniform(0.5, 1.0))
    val = float(rng.uniform(0.55, 1.0))
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)


def make_synthetic(n: int, classes: int = 10, seed: int = 0) -> Dataset:
    """Procedural shape dataset: class fixes shape type and hue band.

    Position, scale, background level and pixel noise are randomized per
    sample; the label histogram is balanced to within one sample.
    """
    if n <= 0 or classes <= 0:
        raise UsageError(f"n and classes must be positive, got {n}, {classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.empty((n, *IMAGE_SHAPE), dtype=np.float32)
    rows, cols = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    for i in range(n):
        cls = int(labels[i])
        bg = rng.uniform(0.05, 0.4, size=3)
        img = np.broadcast_to(bg[:, None, None], IMAGE_SHAPE).copy()
        gdir = rng.normal(size=2)
        gdir /= np.hypot(*gdir) + 1e-9
        gradient = (gdir[0] * (rows - 16) + gdir[1] * (cols - 16)) / 32.0
        img += rng.uniform(0.0, 0.12) * gradient
        cy, cx = rng.uniform(10.0, 22.0, size=2)
        r = float(rng.uniform(5.5, 9.5))
        mask = _shape_mask(cls % _N_SHAPES, rows - cy, cols - cx, r)
        color = _class_color(cls, classes, rng)
        img[:, mask] = color[:, None]
        if rng.random() < 0.35:       # unlabeled distractor blob
            dy, dx = rng.uniform(4.0, 28.0, size=2)
            dr = float(rng.uniform(1.5, 3.0))
            dmask = _shape_mask(int(rng.integers(_N_SHAPES)),
                                rows - dy, cols - dx, dr)
            dcolor = np.array(colorsys.hsv_to_rgb(
                float(rng.random()), float(rng.uniform(0.4, 1.0)),
                float(rng.uniform(0.4, 1.0))))
            img[:, dmask & ~mask] = dcolor[:, None]
        img += rng.normal(0.0, 0.045, size=IMAGE_SHAPE)
        images[i] = np.clip(img, 0.0, 1.0)
    mean, std = _channel_stats(images)
    return Dataset(images, labels.astype(np.int64), "train", mean, std, classes)


def make_synthetic_pair(n_train: int, n_test: int, classes: int = 10,
                        seed: int = 0):
    """Train/test synthetic splits; test reuses the train normalization."""
    train = make_synthetic(n_train, classes, seed)
    test = make_synthetic(n_test, classes, seed + 0x5EED)
    test = dataclasses.replace(
        test, split="test", channel_mean=train.channel_mean,
        channel_std=train.channel_std,
    )
    return train, test


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def _read_batch_file(path: Path):
    if not path.is_file():
        raise DataFormatError(f"missing CIFAR-10 batch file: {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % _RECORD_BYTES != 0:
        raise DataFormatError(
            f"truncated CIFAR-10 batch file {path}: {len(raw)} bytes, "
            f"partial record at offset {len(raw) - len(raw) % _RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(
            f"invalid label {labels[bad]} in {path} at record {bad} "
            f"(offset {bad * _RECORD_BYTES})"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(data_dir) -> tuple[Dataset, Dataset]:
    """Load the standard binary batches; pixel bytes are scaled by 1/255."""
    data_dir = Path(data_dir)
    train_parts = [_read_batch_file(data_dir / name) for name in TRAIN_FILES]
    test_parts = [_read_batch_file(data_dir / name) for name in TEST_FILES]
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images = np.concatenate([p[0] for p in test_parts])
    test_labels = np.concatenate([p[1] for p in test_parts])
    mean, std = _channel_stats(train_images)
    train = Dataset(train_images, train_labels, "train", mean, std, 10)
    test = Dataset(test_images, test_labels, "test", mean, std, 10)
    return train, test


# ---------------------------------------------------------------------------
# sampling and splits
# ---------------------------------------------------------------------------


def sample_calibration(train: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample without replacement; class coverage goes in ``info``."""
    if n > len(train):
        raise UsageError(f"requested {n} calibration samples from {len(train)}")
    rng = np.random.default_rng(seed)
    indices = rng.permutation(len(train))[:n]
    out = train.subset(indices, split="calibration")
    if out.labels is not None:
        present, counts = np.unique(out.labels, return_counts=True)
        out.info["class_coverage"] = {int(c): int(k) for c, k in zip(present, counts)}
    out.info["indices"] = indices
    return out


def split_labeled(train: Dataset, fraction: float, seed: int):
    """Stratified labeled/pool split; the pool keeps images only.

    fraction 1.0 keeps every sample labeled and returns an empty pool; the
    training loop then reuses the labeled images, labels dropped, as the
    unlabeled stream.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}")
    if train.labels is None:
        raise UsageError("cannot split a dataset without labels")
    rng = np.random.default_rng(seed)
    labeled_idx = []
    pool_idx = []
    for cls in np.unique(train.labels):
        cls_idx = np.flatnonzero(train.labels == cls)
        cls_idx = rng.permutation(cls_idx)
        take = int(round(fraction * len(cls_idx)))
        labeled_idx.append(cls_idx[:take])
        pool_idx.append(cls_idx[take:])
    labeled_idx = np.sort(np.concatenate(labeled_idx))
    pool_idx = np.sort(np.concatenate(pool_idx)) if any(len(p) for p in pool_idx) \
        else np.empty(0, dtype=np.int64)
    labeled = train.subset(labeled_idx, split="labeled")
    labeled.info["indices"] = labeled_idx
    pool = train.subset(pool_idx.astype(np.int64), split="pool").drop_labels()
    pool.info["indices"] = pool_idx.astype(np.int64)
    return labeled, pool


# ---------------------------------------------------------------------------
# cache file
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write the single-file cache: magic, version, N, C, pixels, labels."""
    if dataset.labels is None:
        raise UsageError("cannot cache a dataset without labels")
    path = Path(path)
    header = (
        CACHE_MAGIC
        + np.uint32(CACHE_VERSION).tobytes()
        + np.uint32(len(dataset)).tobytes()
        + np.uint32(dataset.num_classes).tobytes()
    )
    body = dataset.images.astype("<f4").tobytes()
    tail = dataset.labels.astype(np.uint8).tobytes()
    path.write_bytes(header + body + tail)


def load_dataset(path) -> Dataset:
    """Read the cache format written by :func:`save_dataset`."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"missing dataset cache file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"dataset cache {path} shorter than its header")
    if raw[:4] != CACHE_MAGIC:
        raise DataFormatError(f"bad magic in {path}: {raw[:4]!r}")
    version, n, classes = np.frombuffer(raw[4:16], dtype=np.uint32)
    if version != CACHE_VERSION:
        raise DataFormatError(f"unsupported cache version {version} in {path}")
    pixel_bytes = int(n) * int(np.prod(IMAGE_SHAPE)) * 4
    expected = 16 + pixel_bytes + int(n)
    if len(raw) != expected:
        raise DataFormatError(
            f"dataset cache {path} has {len(raw)} bytes, expected {expected}; "
            f"truncation at offset {min(len(raw), expected)}"
        )
    images = np.frombuffer(raw[16 : 16 + pixel_bytes], dtype="<f4").reshape(
        int(n), *IMAGE_SHAPE
    ).copy()
    labels = np.frombuffer(raw[16 + pixel_bytes :], dtype=np.uint8).astype(np.int64)
    mean, std = _channel_stats(images)
    return Dataset(images, labels, "train", mean, std, int(classes))
