"""Seeded stochastic image transforms producing two independent views.

Randomness is counter-based: every draw comes from a Philox generator keyed
by (master seed, sample index, step, view, transform slot), so augmentation
is reproducible regardless of iteration order or parallelism. Images are
C x H x W float arrays in [0, 1]; geometric transforms pad with zeros.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# fixed slot per transform so RNG keys stay stable when a transform is disabled
_SLOT_FLIP = 0
_SLOT_TRANSLATE = 1
_SLOT_ROTATE = 2
_SLOT_GRAYSCALE = 3
_SLOT_JITTER = 4


@dataclass(frozen=True)
class AugmentationPolicy:
    """Transform menu with strengths; all stochastic choices are per-draw.

    flip_prob: probability of a horizontal flip.
    translate_px: maximum shift, in pixels, drawn independently per axis.
    jitter: color jitter strength; brightness/contrast/saturation factors are
        drawn uniformly from [1 - jitter, 1 + jitter].
    grayscale_prob: probability of collapsing to channel-mean gray.
    rotate_deg: maximum rotation angle (nearest-neighbor, off by default).
    """

    flip_prob: float = 0.5
    translate_px: int = 4
    jitter: float = 0.4
    grayscale_prob: float = 0.0
    rotate_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.translate_px < 0:
            raise ConfigError(f"translate_px must be >= 0, got {self.translate_px}")
        if self.jitter < 0 or self.rotate_deg < 0:
            raise ConfigError("jitter and rotate_deg must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(flip_prob=0.0, translate_px=0, jitter=0.0,
                   grayscale_prob=0.0, rotate_deg=0.0, seed=seed)


class _KeyedPhilox(threading.local):
    """One Philox generator per thread, re-keyed in place per draw.

    Re-keying through the state dict produces the same stream as building a
    fresh ``Philox(key=...)`` while skipping construction cost.
    """

    def __init__(self):
        self.bitgen = np.random.Philox(key=0)
        self.gen = np.random.Generator(self.bitgen)
        self.template = self.bitgen.state

    def rekey(self, k0: int, k1: int):
        st = self.template
        st["state"]["key"][0] = k0
        st["state"]["key"][1] = k1
        st["state"]["counter"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        self.bitgen.state = st
        return self.gen


_keyed = _KeyedPhilox()


def _rng(seed: int, sample_index: int, step: int, view: int, slot: int):
    """Keyed generator; valid only until the next ``_rng`` call on this thread."""
    if not (0 <= sample_index < 1 << 32):
        raise ConfigError(f"sample_index out of keyable range: {sample_index}")
    if not (0 <= step < 1 << 24):
        raise ConfigError(f"step out of keyable range: {step}")
    k0 = seed & 0xFFFFFFFFFFFFFFFF
    k1 = (sample_index << 32) | (step << 8) | (view << 4) | slot
    return _keyed.rekey(k0, k1)


def _flip(x: np.ndarray, rng) -> np.ndarray:
    return x[:, :, ::-1]


def _translate(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift by (dy rows, dx columns), zero-filling vacated pixels."""
    c, h, w = x.shape
    out = np.zeros_like(x)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[:, dst_r, dst_c] = x[:, src_r, src_c]
    return out


def _rotate(x: np.ndarray, angle_deg: float) -> np.ndarray:
    """Nearest-neighbor rotation about the image center, zero fill."""
    c, h, w = x.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: output pixel -> source pixel
    ry, rx = rows - cy, cols - cx
    src_r = np.cos(theta) * ry + np.sin(theta) * rx + cy
    src_c = -np.sin(theta) * ry + np.cos(theta) * rx + cx
    sr = np.rint(src_r).astype(np.int64)
    sc = np.rint(src_c).astype(np.int64)
    valid = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    out = np.zeros_like(x)
    out[:, rows[valid], cols[valid]] = x[:, sr[valid], sc[valid]]
    return out


def _grayscale(x: np.ndarray) -> np.ndarray:
    gray = x.mean(axis=0, keepdims=True)
    return np.broadcast_to(gray, x.shape).copy()


def _jitter(x: np.ndarray, brightness: float, contrast: float,
            saturation: float) -> np.ndarray:
    """Brightness, then contrast about the image mean, then saturation about
    channel-mean gray, algebraically fused into one affine pass:
    ``out = a*x + b*gray(x) + c``. Coefficients are exact float64 products
    rounded once so the batched path reproduces this bit for bit."""
    mean_all = float(x.mean(dtype=np.float64))
    scale = brightness * contrast
    a = x.dtype.type(scale * saturation)
    bcoef = x.dtype.type(scale * (1.0 - saturation))
    ccoef = x.dtype.type(mean_all * brightness * (1.0 - contrast))
    gray = x.mean(axis=0, keepdims=True)
    out = a * x
    out += bcoef * gray
    out += ccoef
    return out


def augment_view(x: np.ndarray, policy: AugmentationPolicy, sample_index: int,
                 step: int, view: int) -> np.ndarray:
    """Apply the policy's transforms to one view of one sample."""
    out = x
    if policy.flip_prob > 0:
        rng = _rng(policy.seed, sample_index, step, view, _SLOT_FLIP)
        if rng.random() < policy.flip_prob:
            out = _flip(out, rng)
    if policy.translate_px > 0:
        rng = _rng(policy.seed, sample_index, step, view, _SLOT_TRANSLATE)
        dx, dy = rng.integers(-policy.translate_px, policy.translate_px + 1, size=2)
        if dx or dy:
            out = _translate(out, int(dx), int(dy))
    if policy.rotate_deg > 0:
        rng = _rng(policy.seed, sample_index, step, view, _SLOT_ROTATE)
        angle = float(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
        out = _rotate(out, angle)
    if policy.grayscale_prob > 0:
        rng = _rng(policy.seed, sample_index, step, view, _SLOT_GRAYSCALE)
        if rng.random() < policy.grayscale_prob:
            out = _grayscale(out)
    if policy.jitter > 0:
        rng = _rng(policy.seed, sample_index, step, view, _SLOT_JITTER)
        b, c, s = rng.uniform(1.0 - policy.jitter, 1.0 + policy.jitter, size=3)
        out = _jitter(out, float(b), float(c), float(s))
    if out is x:
        out = x.copy()
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def augment_two_views(x: np.ndarray, policy: AugmentationPolicy,
                      sample_index: int, step: int):
    """Two independently augmented views of one sample; labels untouched."""
    v1 = augment_view(x, policy, sample_index, step, view=0)
    v2 = augment_view(x, policy, sample_index, step, view=1)
    return v1, v2


def _augment_batch_view(images: np.ndarray, sample_indices, policy,
                        step: int, view: int) -> np.ndarray:
    """Batched view: per-sample draws use the same keys as augment_view,
    transform application is vectorized over the batch."""
    b = len(images)
    out = images.copy()
    needs_loop = policy.rotate_deg > 0 or policy.grayscale_prob > 0
    if needs_loop:
        # rare transforms fall back to the per-sample reference path
        for row, idx in enumerate(sample_indices):
            out[row] = augment_view(images[row], policy, int(idx), step, view)
        return out

    if policy.flip_prob > 0:
        flips = np.fromiter(
            (_rng(policy.seed, int(i), step, view, _SLOT_FLIP).random()
             < policy.flip_prob for i in sample_indices),
            dtype=bool, count=b,
        )
        out[flips] = out[flips][:, :, :, ::-1]
    if policy.translate_px > 0:
        t = policy.translate_px
        shifts = np.stack([
            _rng(policy.seed, int(i), step, view, _SLOT_TRANSLATE)
            .integers(-t, t + 1, size=2)
            for i in sample_indices
        ])
        h, w = out.shape[2], out.shape[3]
        padded = np.zeros((b, out.shape[1], h + 2 * t, w + 2 * t), dtype=out.dtype)
        padded[:, :, t : t + h, t : t + w] = out
        for row in range(b):
            dx, dy = int(shifts[row, 0]), int(shifts[row, 1])
            out[row] = padded[row, :, t - dy : t - dy + h, t - dx : t - dx + w]
    if policy.jitter > 0:
        factors = np.stack([
            _rng(policy.seed, int(i), step, view, _SLOT_JITTER)
            .uniform(1.0 - policy.jitter, 1.0 + policy.jitter, size=3)
            for i in sample_indices
        ])
        bright, contrast, sat = factors[:, 0], factors[:, 1], factors[:, 2]
        # per-sample flat means so the result matches the per-sample path
        mean_all = np.array([float(img.mean(dtype=np.float64)) for img in out])
        scale = bright * contrast
        dt = out.dtype.type
        a = (scale * sat).astype(dt)[:, None, None, None]
        bcoef = (scale * (1.0 - sat)).astype(dt)[:, None, None, None]
        ccoef = (mean_all * bright * (1.0 - contrast)).astype(dt)[:, None, None, None]
        gray = out.mean(axis=1, keepdims=True)
        out = a * out
        out += bcoef * gray
        out += ccoef
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


def augment_batch_two_views(images: np.ndarray, sample_indices: np.ndarray,
                            policy: AugmentationPolicy, step: int):
    """Batched form of :func:`augment_two_views`; same keyed randomness."""
    v1 = _augment_batch_view(images, sample_indices, policy, step, view=0)
    v2 = _augment_batch_view(images, sample_indices, policy, step, view=1)
    return v1, v2
