"""Finite-difference verification of analytic gradients.

The numeric side perturbs raw values and re-runs the forward function with
no tape active, so it shares nothing with the backward rules it checks.
Run these in float64: at float32 the difference quotient is noise.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape


def finite_difference_grads(f, tensors, step=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. every entry of `tensors`.

    The step is scaled by each entry's magnitude so large and small
    coordinates are probed at comparable relative resolution.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """Worst elementwise |a - n| / max(1, |a|, |n|) across all pairs."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def gradcheck(build_loss, wrt, step=1e-5):
    """Compare tape gradients of ``build_loss()`` against central differences.

    `build_loss` must be a pure function of the current values of `wrt`
    (and any other fixed tensors) returning a scalar Tensor.  Returns the
    max relative error; callers assert it under their tolerance.
    """
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    def f():
        return float(build_loss().data)

    numeric = finite_difference_grads(f, wrt, step=step)
    return max_relative_error(analytic, numeric)
