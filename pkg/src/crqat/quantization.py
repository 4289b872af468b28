"""Uniform affine fake quantization with straight-through gradients.

Values are simulated on a ``2**bits``-level grid: ``x_int = clip(round(x/s) + z,
0, 2**bits - 1)`` and the dequantized output is ``(x_int - z) * s``. Rounding is
half-away-from-zero, fixed so that results reproduce across platforms. Step
sizes may be learned; zero points are frozen integers after calibration.

Weights are quantized per output channel, activations per tensor. The step
size gradient follows the learned-step-size rule: per-element contributions
are summed over the quantization group and scaled by
``1 / sqrt(group_size * (2**bits - 1))``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import CalibrationError, QuantSpecError, ShapeError


class DegenerateRangeWarning(UserWarning):
    """Observed range collapsed to a point; step size fell back to epsilon."""


DEGENERATE_STEP = 1e-8


def round_half_away(x) -> np.ndarray:
    """Round to nearest with ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x)
    out = np.abs(x)
    out += 0.5
    np.floor(out, out=out)
    return np.copysign(out, x, out=out)


@dataclass
class QuantSpec:
    """Parameters of one uniform affine quantizer.

    ``step`` is a positive Tensor of shape (1,) for per-tensor quantization or
    (C,) for per-channel; ``zero_point`` is an integer array of the same shape
    with entries in ``[0, 2**bits - 1]``. ``axis`` names the channel axis for
    per-channel specs and is None for per-tensor ones.
    """

    bits: int
    step: Tensor
    zero_point: np.ndarray
    axis: int | None = None
    step_learnable: bool = True
    degenerate: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.bits < 2:
            raise QuantSpecError(f"bit-width must be >= 2, got {self.bits}")
        step = self.step.data
        if step.ndim != 1:
            raise QuantSpecError(f"step must be 1-d, got shape {step.shape}")
        if not (step > 0).all():
            raise QuantSpecError("step sizes must be strictly positive")
        z = np.asarray(self.zero_point)
        if z.shape != step.shape:
            raise QuantSpecError(
                f"zero_point shape {z.shape} does not match step shape {step.shape}"
            )
        if not np.issubdtype(z.dtype, np.integer):
            raise QuantSpecError("zero points must be integers")
        if z.min() < 0 or z.max() > self.level_max:
            raise QuantSpecError(
                f"zero points must lie in [0, {self.level_max}], "
                f"got range [{z.min()}, {z.max()}]"
            )
        if self.axis is None and step.shape != (1,):
            raise QuantSpecError("per-tensor spec must have exactly one step entry")
        if self.degenerate is None:
            self.degenerate = np.zeros(step.shape, dtype=bool)

    @property
    def level_max(self) -> int:
        return (1 << self.bits) - 1

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    def broadcast_shape(self, ndim: int) -> tuple:
        if self.axis is None:
            return (1,) * ndim
        shape = [1] * ndim
        shape[self.axis] = self.step.data.shape[0]
        return tuple(shape)


def _aligned(spec: QuantSpec, x_shape: tuple):
    """Step/zero-point arrays reshaped to broadcast against ``x_shape``."""
    if spec.per_channel:
        if spec.axis >= len(x_shape) or x_shape[spec.axis] != spec.step.data.shape[0]:
            raise ShapeError(
                f"per-channel spec with {spec.step.data.shape[0]} channels on axis "
                f"{spec.axis} does not match input shape {x_shape}"
            )
    bshape = spec.broadcast_shape(len(x_shape))
    s = spec.step.data.reshape(bshape)
    z = spec.zero_point.reshape(bshape).astype(np.float64)
    return s, z


def integer_levels(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """The grid index ``x_int`` each value maps to (no dequantization)."""
    s, z = _aligned(spec, x.shape)
    dt = x.dtype
    v = x / s.astype(dt) + z.astype(dt)
    # same fused rounding as fake_quantize, so traces match forwards exactly
    x_int = np.floor(v + dt.type(0.5))
    return np.clip(x_int, 0, spec.level_max).astype(np.int64)


def fake_quantize(x: Tensor, spec: QuantSpec) -> Tensor:
    """Quantize-dequantize ``x`` onto the spec's grid, recording STE backward.

    Forward: ``(clip(round(x/s) + z, 0, 2**bits - 1) - z) * s``. Backward
    passes the upstream gradient through wherever the unclipped ``x/s + z``
    lies inside ``[0, 2**bits - 1]`` and zeroes it elsewhere; learnable steps
    receive the summed learned-step-size gradient.
    """
    dt = x.data.dtype
    s, z = _aligned(spec, x.shape)
    qmax = spec.level_max
    sd = s.astype(dt)
    zd = z.astype(dt)
    v = x.data / sd
    v += zd                                    # unrounded grid position
    # clip(round_half_away(v), 0, qmax) == clip(floor(v + 0.5), 0, qmax):
    # the two roundings only differ on negative ties, which clip to 0 anyway
    x_int = v + dt.type(0.5)
    np.floor(x_int, out=x_int)
    np.clip(x_int, dt.type(0), dt.type(qmax), out=x_int)
    out_data = (x_int - zd) * sd

    backward_fn = None
    if autodiff._tracking(x, spec.step):
        mask = (v >= 0) & (v <= qmax)
        step_tensor = spec.step
        learn_step = spec.step_learnable and step_tensor.requires_grad
        if learn_step:
            # d out / d s per element; in range this is round(x/s) - x/s,
            # below range -z, above range qmax - z.
            ds = (x_int - zd) - np.where(mask, v - zd, dt.type(0))
            if spec.per_channel:
                group_size = x.data.size // x.data.shape[spec.axis]
                reduce_axes = tuple(
                    i for i in range(x.data.ndim) if i != spec.axis
                )
            else:
                group_size = x.data.size
                reduce_axes = tuple(range(x.data.ndim))
            gscale = 1.0 / np.sqrt(group_size * qmax)

        def backward_fn(g):
            if x.requires_grad:
                x._accumulate(g * mask)
            if learn_step:
                gs = (g * ds).sum(axis=reduce_axes, dtype=np.float64) * gscale
                step_tensor._accumulate(np.atleast_1d(gs))

    parents = (x, spec.step)
    return autodiff._result(out_data, "fake_quantize", parents, backward_fn)


class MinMaxObserver:
    """Tracks running elementwise min/max over everything observed.

    ``axis=None`` tracks one global range; an integer axis tracks one range
    per slice along that axis (per-channel).
    """

    def __init__(self, axis: int | None = None):
        self.axis = axis
        self.min_val: np.ndarray | None = None
        self.max_val: np.ndarray | None = None
        self.count = 0

    @property
    def empty(self) -> bool:
        return self.count == 0

    def observe(self, x) -> None:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if self.axis is None:
            lo = np.atleast_1d(arr.min())
            hi = np.atleast_1d(arr.max())
        else:
            moved = np.moveaxis(arr, self.axis, 0).reshape(arr.shape[self.axis], -1)
            lo = moved.min(axis=1)
            hi = moved.max(axis=1)
        if self.empty:
            self.min_val = lo.astype(np.float64)
            self.max_val = hi.astype(np.float64)
        else:
            if lo.shape != self.min_val.shape:
                raise ShapeError(
                    f"observer saw {lo.shape[0]} channels, expected "
                    f"{self.min_val.shape[0]}"
                )
            np.minimum(self.min_val, lo, out=self.min_val)
            np.maximum(self.max_val, hi, out=self.max_val)
        self.count += 1


def calibrate(observer: MinMaxObserver, bits: int, *, step_learnable: bool = True,
              dtype=np.float32) -> QuantSpec:
    """Turn observed ranges into a QuantSpec.

    Step is ``(max - min) / (2**bits - 1)``; the zero point is
    ``clip(round(-min/s), 0, 2**bits - 1)`` (asymmetric). A collapsed range
    (min == max) falls back to step ``1e-8`` with zero point 0 and emits a
    :class:`DegenerateRangeWarning`.
    """
    if observer.empty:
        raise CalibrationError("cannot calibrate an observer that saw no data")
    qmax = float((1 << bits) - 1)
    lo, hi = observer.min_val, observer.max_val
    span = hi - lo
    degenerate = span <= 0
    step = np.where(degenerate, DEGENERATE_STEP, span / qmax)
    zero = np.where(
        degenerate, 0.0, np.clip(round_half_away(-lo / step), 0.0, qmax)
    ).astype(np.int64)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} quantization group(s) observed a constant "
            f"range; using step {DEGENERATE_STEP}",
            DegenerateRangeWarning,
            stacklevel=2,
        )
    step_tensor = Tensor(step.astype(dtype), requires_grad=step_learnable)
    return QuantSpec(
        bits=bits,
        step=step_tensor,
        zero_point=zero,
        axis=observer.axis,
        step_learnable=step_learnable,
        degenerate=degenerate,
    )
