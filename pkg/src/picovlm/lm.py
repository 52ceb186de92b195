"""Causal decoder language model and token-sequence plumbing.

The model itself is mode-agnostic: it embeds ids, runs pre-norm causal
blocks, and can splice externally supplied residual layers (the bridge's
cross-attention) between a block's self-attention and its MLP.  The three
operating modes live in `picovlm.model`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import LayerNorm, Linear, TransformerBlock, causal_mask
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, mac_scope

IGNORE = -1


@dataclass
class LMConfig:
    vocab_size: int
    d_l: int = 64
    depth: int = 4
    heads: int = 4
    max_seq: int = 77

    def __post_init__(self):
        if self.d_l % self.heads:
            raise ConfigError(f"d_l={self.d_l} not divisible by heads={self.heads}")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be at least 2, got {self.max_seq}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")


def next_token_targets(ids, prompt_len=1, ignore_index=IGNORE):
    """Shift-by-one targets; prompt predictions and the last slot are ignored.

    Position i is scored on predicting ids[i+1].  Positions inside the
    prompt prefix (everything before index prompt_len - 1) are ignored, so
    the loss only covers continuation tokens.
    """
    n = len(ids)
    targets = [ignore_index] * n
    for i in range(n - 1):
        if i >= prompt_len - 1:
            targets[i] = ids[i + 1]
    return targets


@dataclass
class TokenSequence:
    ids: list
    targets: list

    def __post_init__(self):
        if len(self.ids) != len(self.targets):
            raise DataError("ids and targets must have equal length")

    @classmethod
    def for_ids(cls, ids, prompt_len=1, ignore_index=IGNORE):
        return cls(list(ids), next_token_targets(ids, prompt_len, ignore_index))

    @classmethod
    def for_caption(cls, tokenizer, text, max_seq):
        """<bos> caption <eos>, truncated to max_seq; all caption tokens scored."""
        ids = [tokenizer.bos_id] + tokenizer.encode(text) + [tokenizer.eos_id]
        ids = ids[:max_seq]
        return cls.for_ids(ids, prompt_len=1)

    def __len__(self):
        return len(self.ids)


@dataclass
class ModeSpec:
    """How vision enters the LM: not at all, at mapped depths, or as a prefix."""

    mode: str = "plain"
    selection: object = None   # LayerSelection, hierarchical mode only
    concat_rank: int = -1      # which tap feeds the prefix (default: deepest)

    def __post_init__(self):
        if self.mode not in ("plain", "hierarchical", "concat"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "hierarchical" and self.selection is None:
            raise ConfigError("hierarchical mode needs a layer selection")


class LanguageModel:
    def __init__(self, cfg: LMConfig, rng, dtype=T.STANDARD, n_positions=None):
        self.cfg = cfg
        self.dtype = dtype
        self.n_positions = n_positions or cfg.max_seq
        self.tok_emb = T.normal_param(rng, (cfg.vocab_size, cfg.d_l), dtype=dtype)
        self.pos_emb = T.normal_param(rng, (self.n_positions, cfg.d_l), dtype=dtype)
        self.blocks = [TransformerBlock(rng, cfg.d_l, cfg.heads, dtype) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.d_l, dtype)
        self.head = Linear(rng, cfg.d_l, cfg.vocab_size, dtype, bias=False)

    @property
    def depth(self):
        return self.cfg.depth

    def embed(self, ids, offset=0):
        """Token + absolute position embeddings for one id sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DataError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        if offset + len(ids) > self.n_positions:
            raise ShapeError(
                f"sequence of {len(ids)} tokens at offset {offset} exceeds "
                f"{self.n_positions} positions")
        x = T.embedding(self.tok_emb, ids)
        return T.add(x, T.slice_rows(self.pos_emb, offset, offset + len(ids)))

    def forward_hidden(self, x, injections=None):
        """Causal blocks over embedded input; `injections` maps a 1-indexed
        block to a callable applied between its attention and MLP."""
        injections = injections or {}
        mask = causal_mask(x.shape[0])
        for l in range(1, self.depth + 1):
            blk = self.blocks[l - 1]
            x = blk.attn_part(x, mask=mask, scope="llm")
            inject = injections.get(l)
            if inject is not None:
                x = inject(x)
            x = blk.mlp_part(x, scope="llm")
        return self.ln_f(x)

    def logits(self, hidden):
        with mac_scope("head"):
            return self.head(hidden)

    def named_params(self, prefix="llm"):
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.blocks.{i}")
        yield from self.ln_f.named_params(f"{prefix}.ln_f")
        yield from self.head.named_params(f"{prefix}.head")
