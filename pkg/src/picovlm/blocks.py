"""Parameter containers shared by the vision encoder and the language model.

All blocks are pre-norm: ``x + f(norm(x))`` for both the attention and MLP
branches, so zeroing an output projection makes the whole branch an exact
no-op (handy for identity checks and for gating).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, mac_scope


class Linear:
    def __init__(self, rng, d_in, d_out, dtype=T.STANDARD, bias=True, std=0.02):
        self.w = T.normal_param(rng, (d_in, d_out), std=std, dtype=dtype)
        self.b = T.zeros((d_out,), dtype=dtype, requires_grad=True) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d, dtype=T.STANDARD, eps=1e-5):
        self.gamma = T.ones((d,), dtype=dtype, requires_grad=True)
        self.beta = T.zeros((d,), dtype=dtype, requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)

    def named_params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


def split_heads(x, heads):
    """[T, d] -> [heads, T, d/heads]."""
    t, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    return T.permute(T.reshape(x, (t, heads, d // heads)), (1, 0, 2))


def merge_heads(x):
    """[heads, T, dh] -> [T, heads*dh]."""
    h, t, dh = x.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (t, h * dh))


class SelfAttention:
    """Multi-head scaled dot-product self-attention over one sequence."""

    def __init__(self, rng, d, heads, dtype=T.STANDARD):
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(rng, d, d, dtype)
        self.wk = Linear(rng, d, d, dtype)
        self.wv = Linear(rng, d, d, dtype)
        self.wo = Linear(rng, d, d, dtype)

    def __call__(self, x, mask=None, scope="attn"):
        with mac_scope(f"{scope}.proj"):
            q = split_heads(self.wq(x), self.heads)
            k = split_heads(self.wk(x), self.heads)
            v = split_heads(self.wv(x), self.heads)
        with mac_scope(f"{scope}.qk"):
            scores = T.matmul(q, T.transpose(k))
        scores = T.mul(scores, 1.0 / math.sqrt(self.d_head))
        att = T.softmax_rows(scores, mask=mask)
        with mac_scope(f"{scope}.av"):
            ctx = T.matmul(att, v)
        with mac_scope(f"{scope}.proj"):
            return self.wo(merge_heads(ctx))

    def named_params(self, prefix):
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from lin.named_params(f"{prefix}.{tag}")


class Mlp:
    """Two linears with exact-CDF GELU between, expansion factor 4."""

    def __init__(self, rng, d, dtype=T.STANDARD, expansion=4):
        self.fc1 = Linear(rng, d, expansion * d, dtype)
        self.fc2 = Linear(rng, expansion * d, d, dtype)

    def __call__(self, x, scope="mlp"):
        with mac_scope(scope):
            return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self, prefix):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


class TransformerBlock:
    def __init__(self, rng, d, heads, dtype=T.STANDARD):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = SelfAttention(rng, d, heads, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = Mlp(rng, d, dtype)

    def attn_part(self, x, mask=None, scope="blk"):
        return T.add(x, self.attn(self.ln1(x), mask=mask, scope=scope))

    def mlp_part(self, x, scope="blk"):
        return T.add(x, self.mlp(self.ln2(x), scope=f"{scope}.mlp"))

    def __call__(self, x, mask=None, scope="blk"):
        return self.mlp_part(self.attn_part(x, mask=mask, scope=scope), scope=scope)

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.mlp.named_params(f"{prefix}.mlp")


def causal_mask(n):
    """Boolean [n, n]; True where position i may attend to j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))
