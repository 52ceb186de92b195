"""Dense tensors with tape-based reverse-mode autodiff.

Everything in this package computes on `Tensor` objects backed by NumPy
arrays.  Two precisions are supported: float32 for ordinary training and
float64 ("high precision") for finite-difference verification, where
float32 rounding would drown the comparison.

Gradients are tracked on an explicit `Tape`.  Ops executed while a tape is
active append a node (inputs, output, backward rule); replaying the tape in
reverse accumulates gradients.  Accumulation always sums — a tensor used in
several places ends up with the sum of the per-use gradients, which the
multi-tap model graph relies on.

Matmuls optionally report multiply-accumulate counts to an active
`MacCounter`, attributed to the innermost `mac_scope` label.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowError, GraphError, ShapeError

STANDARD = np.float32
HIGH = np.float64

_INV_SQRT2 = 0.7071067811865475244
_INV_SQRT_2PI = 0.3989422804014326779


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(STANDARD)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Value-sharing copy that is cut out of the gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Run reverse-mode accumulation from this scalar root."""
        if self._tape is None:
            raise GraphError("backward() on a tensor that was not recorded on a tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; one tape per forward/backward pass.

    Nodes are appended in execution order, so the list is already
    topologically sorted and backward() can simply walk it in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _state.tapes.pop()
        assert popped is self

    def backward(self, root):
        if root.size != 1:
            raise GraphError(f"backward root must be a scalar, got shape {root.shape}")
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += np.ones_like(root.data)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            input_grads = node.backward_fn(out_grad)
            for inp, g in zip(node.inputs, input_grads):
                if g is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


class _ThreadState(threading.local):
    def __init__(self):
        self.tapes = []
        self.counters = []
        self.scopes = []


_state = _ThreadState()


def current_tape():
    return _state.tapes[-1] if _state.tapes else None


def _finish(inputs, out_data, backward_fn):
    """Wrap an op result, recording it when gradients are live."""
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


# ---------------------------------------------------------------------------
# MAC accounting


class MacCounter:
    """Per-component multiply-accumulate tally.

    Only matmuls count (one MAC per scalar multiply-add); softmax, norms and
    activations are excluded by convention.  Counters are plain objects, so
    concurrent model instances can each capture their own.
    """

    def __init__(self):
        self.by_component = {}

    def add(self, component, macs):
        self.by_component[component] = self.by_component.get(component, 0) + macs

    def total(self):
        return sum(self.by_component.values())

    def reset(self):
        self.by_component.clear()

    def capture(self):
        return _CounterScope(self)


class _CounterScope:
    def __init__(self, counter):
        self.counter = counter

    def __enter__(self):
        _state.counters.append(self.counter)
        return self.counter

    def __exit__(self, *exc):
        _state.counters.pop()


class mac_scope:
    """Label matmuls executed inside the block, e.g. ``with mac_scope("llm.qk")``."""

    def __init__(self, component):
        self.component = component

    def __enter__(self):
        _state.scopes.append(self.component)
        return self

    def __exit__(self, *exc):
        _state.scopes.pop()


def _count_macs(m, n, k, batch=1):
    if _state.counters:
        label = _state.scopes[-1] if _state.scopes else "other"
        macs = int(batch) * int(m) * int(n) * int(k)
        for counter in _state.counters:
            counter.add(label, macs)


# ---------------------------------------------------------------------------
# Ops


def add(a, b):
    """Elementwise sum; also accepts a Python scalar or a trailing-dim bias."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _finish([a], a.data + c, lambda g: (g,))
    if a.shape == b.shape:
        return _finish([a, b], a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        # bias broadcast over leading axes
        lead = tuple(range(a.ndim - 1))
        return _finish([a, b], a.data + b.data, lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _finish([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    """Elementwise product with a Tensor of equal shape or a Python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _finish([a], a.data * c, lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _finish([a, b], a.data * b.data, backward)


def scale(x, s):
    """Multiply `x` by a single-element tensor `s` (a learnable gate)."""
    if s.size != 1:
        raise ShapeError(f"scale factor must have one element, got shape {s.shape}")
    sval = s.data.reshape(())

    def backward(g):
        gx = g * sval if x.requires_grad else None
        gs = np.sum(g * x.data).reshape(s.shape).astype(s.dtype) if s.requires_grad else None
        return gx, gs

    return _finish([x, s], x.data * sval, backward)


def matmul(a, b):
    """Matrix product of two 2-d tensors or two equal-batch 3-d tensors."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
        _count_macs(a.shape[0], b.shape[1], a.shape[1])
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")
        _count_macs(a.shape[1], b.shape[2], a.shape[2], batch=a.shape[0])
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -2, -1))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -2, -1), g)
        return ga, gb

    return _finish([a, b], np.matmul(a.data, b.data), backward)


def transpose(x):
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")
    return _finish([x], np.swapaxes(x.data, -2, -1), lambda g: (np.swapaxes(g, -2, -1),))


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish([x], np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape):
    old = x.shape
    return _finish([x], x.data.reshape(shape), lambda g: (g.reshape(old),))


def sum_all(x):
    return _finish([x], np.sum(x.data), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x):
    n = x.size
    return _finish(
        [x], np.mean(x.data), lambda g: ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)
    )


def mean_rows(x):
    """Column means of a matrix: [n, d] -> [d]."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows needs a matrix, got shape {x.shape}")
    n = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _finish([x], x.data.mean(axis=0), backward)


def concat_rows(a, b):
    """Stack two row-major matrices vertically."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    split = a.shape[0]
    return _finish([a, b], np.concatenate([a.data, b.data], axis=0),
                   lambda g: (g[:split], g[split:]))


def slice_rows(x, start, stop):
    if x.ndim != 2:
        raise ShapeError(f"slice_rows needs a matrix, got shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _finish([x], x.data[start:stop].copy(), backward)


def embedding(weight, ids):
    """Row lookup into `weight`; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be a flat sequence, got shape {ids.shape}")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _finish([weight], weight.data[ids], backward)


def gelu(x):
    """Exact-CDF GELU, x * Phi(x); no tanh approximation."""
    phi_x = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (phi_x + x.data * pdf),)

    return _finish([x], x.data * phi_x, backward)


def stop_gradient(x):
    """Identity on values; gradients do not flow past it."""
    return Tensor(x.data, requires_grad=False)


def softmax_rows(x, mask=None):
    """Row-wise softmax over the last axis, stabilised by max subtraction.

    `mask` is an optional boolean array broadcastable to `x`; True marks
    positions that may receive weight.  Masked entries come out exactly 0.
    A row with no unmasked entry is an error, not a NaN.
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax_rows: a row is fully masked")
        neg_inf = np.array(-np.inf, dtype=data.dtype)
        shifted = np.where(mask, data, neg_inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        e = np.where(mask, e, 0.0)
    else:
        shifted = data - data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _finish([x], y, backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ShapeError("layernorm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        g_beta = g.sum(axis=lead) if beta.requires_grad else None
        g_gamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        g_x = None
        if x.requires_grad:
            gy = g * gamma.data
            g_x = inv_std * (gy - gy.mean(axis=-1, keepdims=True)
                             - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
        return g_x, g_gamma, g_beta

    return _finish([x, gamma, beta], out, backward)


def cross_entropy_next_token(logits, targets, ignore_index=-1):
    """Mean negative log-likelihood over non-ignored positions.

    `logits` is [T x V]; `targets` a length-T integer sequence.  Positions
    whose target equals `ignore_index` contribute neither loss nor gradient.
    Log-sum-exp stabilised.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise GraphError("cross_entropy: every position is ignored, loss undefined")
    v = logits.shape[1]
    if ((targets[valid] < 0) | (targets[valid] >= v)).any():
        raise ShapeError(f"cross_entropy: target id outside [0, {v})")

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=-1)) + zmax[:, 0]
    picked = z[np.arange(len(targets)), np.where(valid, targets, 0)]
    losses = lse - picked
    loss = losses[valid].sum() / n_valid

    def backward(g):
        p = ez / ez.sum(axis=-1, keepdims=True)
        grad = p.copy()
        grad[np.arange(len(targets)), np.where(valid, targets, 0)] -= 1.0
        grad[~valid] = 0.0
        return ((g / n_valid) * grad,)

    return _finish([logits], np.asarray(loss, dtype=logits.dtype), backward)


# ---------------------------------------------------------------------------
# Construction helpers


def zeros(shape, dtype=STANDARD, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=STANDARD, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def normal_param(rng, shape, std=0.02, dtype=STANDARD):
    """Gaussian-initialised trainable parameter."""
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)
