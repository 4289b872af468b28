"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from crqat.autodiff import Tensor, backward


def central_diff(f, arrays, h=1e-4):
    """Numeric gradient of scalar-valued ``f(*arrays)`` for each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    scale = max(float(np.abs(numeric).max()), 1e-3)
    return float(np.abs(analytic - numeric).max()) / scale


def check_gradients(build_loss, shapes, seed, h=1e-4, sampler=None):
    """Compare analytic and finite-difference grads for one random draw.

    ``build_loss`` maps a tuple of Tensors to a scalar Tensor. ``sampler``
    draws the raw arrays (defaults to standard normal); every array is
    float64 so the finite differences are trustworthy at ``h``.
    """
    rng = np.random.default_rng(seed)
    if sampler is None:
        arrays = [rng.standard_normal(s) for s in shapes]
    else:
        arrays = sampler(rng)
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64)
               for a in arrays]
    loss = build_loss(*tensors)
    backward(loss)

    def f(*raw):
        frozen = [Tensor(r.copy(), dtype=np.float64) for r in raw]
        return float(build_loss(*frozen).data)

    numeric = central_diff(f, arrays, h=h)
    errs = []
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "missing analytic gradient"
        errs.append(max_rel_err(t.grad, num))
    return max(errs)
