"""Dense-tensor reverse-mode automatic differentiation.

Small, auditable engine sized for little CNN/MLP classifiers: NCHW layout,
row-major storage, no broadcasting beyond the bias add inside ``linear`` and
``conv2d``. Tensors store float32 by default (float64 is supported end to end
for high-precision checks). Whole-tensor reductions (sums, means, softmax,
losses) accumulate in float64 before the result is cast back to the storage
dtype; matrix products and fixed-size pooling windows run in the storage
dtype itself.

Every op output and every gradient is checked for NaN/Inf and raises
:class:`~crqat.errors.NonFiniteError` on violation.
"""

from __future__ import annotations

import ctypes

import numpy as np

from .errors import NonFiniteError, ShapeError, UsageError

_SUPPORTED_DTYPES = (np.float32, np.float64)

_grad_enabled = True

_allocator_tuned = False


def tune_allocator() -> None:
    """Keep large blocks in the malloc arena instead of mmap/munmap cycles.

    Training allocates fresh multi-megabyte activation arrays every op; with
    glibc defaults each one round-trips through mmap and kernel page zeroing,
    which costs more than the arithmetic. Raising the mmap and trim
    thresholds once makes those allocations recycle. No-op off glibc.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)   # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


class no_grad:
    """Context manager that disables graph recording (e.g. teacher forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single fused pass: any NaN/Inf in arr makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _SUPPORTED_DTYPES:
                arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, grad_arr: np.ndarray) -> None:
        grad_arr = np.asarray(grad_arr, dtype=self.data.dtype)
        _check_finite(grad_arr, f"grad[{self._op}]")
        if self.grad is None:
            self.grad = grad_arr.copy()
        else:
            self.grad += grad_arr

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"


def _tracking(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _result(out_data: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if backward_fn is not None:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _common_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data
    backward_fn = None
    if _tracking(a, b):
        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
    return _result(out_data, "add", (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data
    backward_fn = None
    if _tracking(a, b):
        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
    return _result(out_data, "mul", (a, b), backward_fn)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            a._accumulate(g * c)
    return _result(out_data, "mul_scalar", (a,), backward_fn)


def tensor_sum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            a._accumulate(np.full(a.shape, float(g), dtype=a.data.dtype))
    return _result(out_data, "sum", (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    backward_fn = None
    if _tracking(a):
        mask = a.data > 0
        def backward_fn(g):
            a._accumulate(g * mask)
    return _result(out_data, "relu", (a,), backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0 (e.g. the labeled slice of a batch)."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise UsageError(
            f"slice_rows: range [{start}, {stop}) invalid for {a.shape[0]} rows"
        )
    out_data = a.data[start:stop].copy()
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            ga = np.zeros(a.shape, dtype=a.data.dtype)
            ga[start:stop] = g
            a._accumulate(ga)
    return _result(out_data, "slice_rows", (a,), backward_fn)


def flatten(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 axes, got shape {a.shape}")
    n = a.shape[0]
    out_data = a.data.reshape(n, -1)
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            a._accumulate(g.reshape(a.shape))
    return _result(out_data, "flatten", (a,), backward_fn)


def avg_pool2d(a: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling with floor semantics.

    Trailing rows/columns that do not fill a complete ``window x window``
    block are dropped, so the output is ``floor(H / window)`` by
    ``floor(W / window)``.
    """
    if a.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got shape {a.shape}")
    if window < 1:
        raise UsageError(f"avg_pool2d: window must be >= 1, got {window}")
    n, c, h, w = a.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ShapeError(
            f"avg_pool2d: window {window} exceeds spatial extent of {a.shape}"
        )
    x = a.data[:, :, : ho * window, : wo * window]
    inv = 1.0 / (window * window)
    out_data = np.zeros((n, c, ho, wo), dtype=a.data.dtype)
    for i in range(window):
        for j in range(window):
            out_data += x[:, :, i::window, j::window]
    out_data *= a.data.dtype.type(inv)
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            gx = np.zeros(a.shape, dtype=a.data.dtype)
            gscaled = g * inv
            for i in range(window):
                for j in range(window):
                    gx[:, :, i : ho * window : window,
                       j : wo * window : window] = gscaled
            a._accumulate(gx)
    return _result(out_data, "avg_pool2d", (a,), backward_fn)


# ---------------------------------------------------------------------------
# affine ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x[N,D], weight[M,D], bias[M]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(
            f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: inner axes differ, input axis 1 is {x.shape[1]} "
            f"but weight axis 1 is {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear: bias shape {bias.shape} does not match output extent "
            f"{weight.shape[0]}"
        )
    dtype = _common_dtype(x, weight, bias)
    xd = x.data.astype(dtype, copy=False)
    wd = weight.data.astype(dtype, copy=False)
    out_data = xd @ wd.T + bias.data.astype(dtype, copy=False)
    backward_fn = None
    if _tracking(x, weight, bias):
        def backward_fn(g):
            g = g.astype(dtype, copy=False)
            if x.requires_grad:
                x._accumulate(g @ wd)
            if weight.requires_grad:
                weight._accumulate(g.T @ xd)
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0, dtype=np.float64))
    return _result(out_data, "linear", (x, weight, bias), backward_fn)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Patches flattened to [C*kh*kw, N*ho*wo] so one GEMM covers the batch."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation for x[N,C,H,W] and weight[K,C,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: channel axes differ, input axis 1 is {c} "
            f"but weight axis 1 is {cw}"
        )
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} filters")
    if stride < 1:
        raise UsageError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}, {kw}) exceeds padded input ({hp}, {wp}) "
            "on the spatial axes"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    dtype = _common_dtype(x, weight, bias)
    if padding > 0:
        xp = np.zeros((n, c, hp, wp), dtype=dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data.astype(dtype, copy=False)
    cols = _im2col(xp, kh, kw, stride, ho, wo)           # [C*kh*kw, N*L]
    wmat = weight.data.reshape(k, -1).astype(dtype, copy=False)
    out2d = wmat @ cols                                  # [K, N*L]
    out2d += bias.data.astype(dtype, copy=False)[:, None]
    out_data = np.ascontiguousarray(
        out2d.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    )

    backward_fn = None
    if _tracking(x, weight, bias):
        cols_saved = cols
        def backward_fn(g):
            g2d = np.ascontiguousarray(
                g.transpose(1, 0, 2, 3).astype(dtype, copy=False)
            ).reshape(k, n * ho * wo)
            if weight.requires_grad:
                gw = g2d @ cols_saved.T                  # [K, C*kh*kw]
                weight._accumulate(gw.reshape(weight.shape))
            if bias.requires_grad:
                bias._accumulate(g2d.sum(axis=1, dtype=np.float64))
            if x.requires_grad:
                gcols = wmat.T @ g2d                     # [C*kh*kw, N*L]
                gp = gcols.reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((n, c, hp, wp), dtype=dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride,
                            j : j + stride * wo : stride] += \
                            gp[:, i, j].transpose(1, 0, 2, 3)
                if padding > 0:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                x._accumulate(gxp)
    return _result(out_data, "conv2d", (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------


def _softmax64(arr: np.ndarray) -> np.ndarray:
    z = arr.astype(np.float64, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax64(arr: np.ndarray) -> np.ndarray:
    z = arr.astype(np.float64, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.shape[-1] == 0:
        raise ShapeError("softmax: last axis is empty")
    y64 = _softmax64(a.data)
    out_data = y64.astype(a.data.dtype)
    backward_fn = None
    if _tracking(a):
        def backward_fn(g):
            g64 = g.astype(np.float64, copy=False)
            dot = (g64 * y64).sum(axis=-1, keepdims=True)
            a._accumulate(y64 * (g64 - dot))
    return _result(out_data, "softmax", (a,), backward_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match "
            f"batch size {logits.shape[0]}"
        )
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise UsageError(
            f"cross_entropy: labels must lie in [0, {c}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    logp = _log_softmax64(logits.data)
    rows = np.arange(n)
    out_data = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)
    backward_fn = None
    if _tracking(logits):
        p64 = np.exp(logp)
        def backward_fn(g):
            grad = p64.copy()
            grad[rows, labels] -= 1.0
            logits._accumulate(grad * (float(g) / n))
    return _result(out_data, "cross_entropy", (logits,), backward_fn)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff64 = a.data.astype(np.float64, copy=False) - b.data.astype(np.float64, copy=False)
    out_data = np.asarray(np.mean(diff64 * diff64), dtype=_common_dtype(a, b))
    backward_fn = None
    if _tracking(a, b):
        inv = 2.0 / diff64.size
        def backward_fn(g):
            base = diff64 * (inv * float(g))
            if a.requires_grad:
                a._accumulate(base)
            if b.requires_grad:
                b._accumulate(-base)
    return _result(out_data, "mse_loss", (a, b), backward_fn)


def kl_div_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean over the batch of ``KL(softmax(teacher) || softmax(student))``."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"kl_div_loss: shapes {student_logits.shape} and "
            f"{teacher_logits.shape} differ"
        )
    if student_logits.ndim != 2:
        raise ShapeError(
            f"kl_div_loss: expected [N, C] logits, got {student_logits.shape}"
        )
    n = student_logits.shape[0]
    log_p = _log_softmax64(teacher_logits.data)
    log_q = _log_softmax64(student_logits.data)
    p = np.exp(log_p)
    row_kl = (p * (log_p - log_q)).sum(axis=-1)
    out_data = np.asarray(row_kl.mean(), dtype=_common_dtype(student_logits, teacher_logits))
    backward_fn = None
    if _tracking(student_logits, teacher_logits):
        q = np.exp(log_q)
        def backward_fn(g):
            scale = float(g) / n
            if student_logits.requires_grad:
                student_logits._accumulate((q - p) * scale)
            if teacher_logits.requires_grad:
                gt = p * ((log_p - log_q) - row_kl[:, None])
                teacher_logits._accumulate(gt * scale)
    return _result(out_data, "kl_div_loss", (student_logits, teacher_logits), backward_fn)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar produced by a recorded graph. Each node is
    visited exactly once in reverse topological order; interior gradients are
    freed after use, so calling ``backward`` again on another loss (or the
    same one) accumulates into leaf ``grad`` buffers.
    """
    if loss.shape != ():
        raise UsageError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: root does not require grad (no recorded graph)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss._accumulate(np.ones((), dtype=loss.data.dtype))
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None  # interior gradients are transient
