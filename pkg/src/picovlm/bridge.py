"""Projectors and gated cross-attention between encoder taps and the LM.

Each tap owns one projector (2-layer GELU MLP with a residual path) and one
cross-attention block.  Queries come from the LM's hidden states, keys and
values from the projected vision features; nothing is causally masked on
the vision side, since text may look at the whole image.

Every block carries a learnable scalar gate, initialised to zero, scaling
its residual contribution.  At init the injected model is therefore
bit-identical to the bare LM, which keeps early training stable and makes
the injection trivially verifiable.
"""

from __future__ import annotations

import math

from . import tensor as T
from .blocks import LayerNorm, Linear, merge_heads, split_heads
from .errors import ShapeError
from .tensor import mac_scope


class Projector:
    """Maps one tap from encoder width to LM width, token count preserved."""

    def __init__(self, rng, d_in, d_out, dtype=T.STANDARD):
        self.fc1 = Linear(rng, d_in, d_out, dtype)
        self.fc2 = Linear(rng, d_out, d_out, dtype)
        self.res = Linear(rng, d_in, d_out, dtype, bias=False) if d_in != d_out else None

    def __call__(self, features):
        with mac_scope("proj"):
            h = self.fc2(T.gelu(self.fc1(features)))
            r = self.res(features) if self.res is not None else features
        return T.add(h, r)

    def named_params(self, prefix):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")
        if self.res is not None:
            yield from self.res.named_params(f"{prefix}.res")


class CrossAttentionBlock:
    def __init__(self, rng, d, heads, dtype=T.STANDARD):
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.q_norm = LayerNorm(d, dtype)
        self.kv_norm = LayerNorm(d, dtype)
        self.wq = Linear(rng, d, d, dtype)
        self.wk = Linear(rng, d, d, dtype)
        self.wv = Linear(rng, d, d, dtype)
        self.wo = Linear(rng, d, d, dtype)
        self.gate = T.zeros((1,), dtype=dtype, requires_grad=True)

    def __call__(self, llm_hidden, vision_kv, attn_sink=None):
        """llm_hidden [N_t, d] + gate * OutProj(softmax(QK^T/sqrt(dh)) V).

        `attn_sink`, when given, receives the per-head weight array
        [heads, N_t, N_kv] for introspection.
        """
        if llm_hidden.shape[-1] != vision_kv.shape[-1]:
            raise ShapeError(
                f"hidden width {llm_hidden.shape} vs vision width {vision_kv.shape}")
        with mac_scope("xattn"):
            q = split_heads(self.wq(self.q_norm(llm_hidden)), self.heads)
            kv = self.kv_norm(vision_kv)
            k = split_heads(self.wk(kv), self.heads)
            v = split_heads(self.wv(kv), self.heads)
            scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d_head))
            att = T.softmax_rows(scores)
            if attn_sink is not None:
                attn_sink.append(att.data.copy())
            ctx = self.wo(merge_heads(T.matmul(att, v)))
        return T.add(llm_hidden, T.scale(ctx, self.gate))

    def named_params(self, prefix):
        yield from self.q_norm.named_params(f"{prefix}.q_norm")
        yield from self.kv_norm.named_params(f"{prefix}.kv_norm")
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from lin.named_params(f"{prefix}.{tag}")
        yield f"{prefix}.gate", self.gate
