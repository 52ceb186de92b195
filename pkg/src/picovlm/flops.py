"""Attention cost accounting: closed forms versus instrumented counts.

Counting convention (also echoed in every report):

  * one MAC per scalar multiply-add inside a matmul, and matmuls only;
    softmax, norms and activations are excluded,
  * attention scores are counted unmasked (masking zeroes weights, it does
    not skip computation),
  * c_mlp = 8 covers the two MLP linears (d->4d and 4d->d) per token per
    layer; c_x = 4 covers the query/key/value/output projections of one
    injected cross-attention block.

Two kinds of closed form live here.  `analytic_flops` evaluates the
order-of-growth formulas this design is argued with:

    self-attention:   L_l * (N^2 d / 2 + N d^2 c_mlp),  N = N_v + N_t
    cross-attention:  L_l * L_s * d^2 * c_x + L_l * N_t * d^2 * c_mlp

`exact_component_flops` is the per-component ledger of the actual
architecture; the instrumented counters must reproduce it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .lm import ModeSpec, TokenSequence
from .tensor import MacCounter

C_MLP = 8
C_X = 4

LLM_INTERNAL = ("llm.proj", "llm.qk", "llm.av", "llm.mlp", "head")


def analytic_flops(lm_depth, d, n_vision, n_text, n_selected, mode,
                   c_mlp=C_MLP, c_x=C_X):
    """Order-of-growth terms for one forward pass of the LM side."""
    if mode == "self-attn":
        n = n_vision + n_text
        terms = {
            "attention": lm_depth * (n * n) * d / 2.0,
            "mlp": lm_depth * n * d * d * c_mlp,
        }
    elif mode == "cross-attn":
        terms = {
            "cross_attention": lm_depth * n_selected * d * d * c_x,
            "mlp": lm_depth * n_text * d * d * c_mlp,
        }
    else:
        raise ValueError(f"mode must be self-attn or cross-attn, got {mode!r}")
    return {"mode": mode, "terms": terms, "total": sum(terms.values())}


def _encoder_components(enc_cfg):
    n_e = enc_cfg.n_tokens
    d_v = enc_cfg.d_v
    patch_dim = enc_cfg.patch_size ** 2 * enc_cfg.channels
    return {
        "embed": enc_cfg.n_patches * patch_dim * d_v,
        "enc.proj": enc_cfg.depth * 4 * n_e * d_v * d_v,
        "enc.qk": enc_cfg.depth * n_e * n_e * d_v,
        "enc.av": enc_cfg.depth * n_e * n_e * d_v,
        "enc.mlp": enc_cfg.depth * 8 * n_e * d_v * d_v,
    }


def _llm_components(lm_cfg, seq_len):
    d = lm_cfg.d_l
    return {
        "llm.proj": lm_cfg.depth * 4 * seq_len * d * d,
        "llm.qk": lm_cfg.depth * seq_len * seq_len * d,
        "llm.av": lm_cfg.depth * seq_len * seq_len * d,
        "llm.mlp": lm_cfg.depth * 8 * seq_len * d * d,
        "head": seq_len * d * lm_cfg.vocab_size,
    }


def _projector_macs(enc_cfg, lm_cfg):
    n_e = enc_cfg.n_tokens
    macs = n_e * enc_cfg.d_v * lm_cfg.d_l + n_e * lm_cfg.d_l * lm_cfg.d_l
    if enc_cfg.d_v != lm_cfg.d_l:
        macs += n_e * enc_cfg.d_v * lm_cfg.d_l
    return macs


def exact_component_flops(enc_cfg, lm_cfg, selection, n_text, mode):
    """Exact expected MACs per component for one forward pass."""
    d = lm_cfg.d_l
    n_e = enc_cfg.n_tokens
    if mode == "plain":
        return _llm_components(lm_cfg, n_text)
    comps = _encoder_components(enc_cfg)
    if mode == "hierarchical":
        n_sel = selection.n_selected
        comps["proj"] = n_sel * _projector_macs(enc_cfg, lm_cfg)
        comps["xattn"] = n_sel * (
            2 * n_text * d * d        # query and output projections
            + 2 * n_e * d * d         # key and value projections
            + 2 * n_text * n_e * d    # scores and weighted values
        )
        comps.update(_llm_components(lm_cfg, n_text))
    elif mode == "concat":
        comps["proj"] = _projector_macs(enc_cfg, lm_cfg)
        comps.update(_llm_components(lm_cfg, n_e + n_text))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return comps


def measured_flops(model, seq, vision, mode):
    """Instrumented per-component MACs for one forward pass."""
    counter = MacCounter()
    with counter.capture():
        model.forward(seq, vision, mode)
    return dict(counter.by_component)


@dataclass
class FlopReport:
    mode: str
    config: dict
    analytic: dict
    measured: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)

    @property
    def measured_total(self):
        return sum(self.measured.values())

    @property
    def llm_internal(self):
        return sum(self.measured.get(k, 0) for k in LLM_INTERNAL)

    def to_dict(self):
        return {
            "mode": self.mode,
            "convention": ("1 MAC per scalar multiply-add, matmuls only, unmasked "
                           f"attention counting; c_mlp={C_MLP}, c_x={C_X}"),
            "config": self.config,
            "analytic": self.analytic,
            "expected_components": self.expected,
            "measured_components": self.measured,
            "measured_total": self.measured_total,
            "llm_internal_measured": self.llm_internal,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    @staticmethod
    def load(path):
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return FlopReport(mode=raw["mode"], config=raw["config"],
                          analytic=raw["analytic"],
                          measured=raw["measured_components"],
                          expected=raw["expected_components"])


def flop_report(model, n_text, mode_name, seed=0):
    """Build a full report for `mode_name` in (plain, hierarchical, concat)
    by running one instrumented forward on a synthetic input."""
    import numpy as np

    enc_cfg, lm_cfg, selection = model.enc_cfg, model.lm_cfg, model.selection
    rng = np.random.default_rng([seed, 11])
    ids = rng.integers(0, lm_cfg.vocab_size, size=n_text).tolist()
    seq = TokenSequence.for_ids(ids)
    image = rng.random((enc_cfg.image_h, enc_cfg.image_w, enc_cfg.channels))
    if mode_name == "plain":
        mode, vision = ModeSpec("plain"), None
    elif mode_name == "hierarchical":
        mode, vision = ModeSpec("hierarchical", selection=selection), image
    elif mode_name == "concat":
        mode, vision = ModeSpec("concat"), image
    else:
        raise ValueError(f"unknown mode {mode_name!r}")

    analytic = analytic_flops(
        lm_cfg.depth, lm_cfg.d_l, enc_cfg.n_tokens, n_text, selection.n_selected,
        "cross-attn" if mode_name == "hierarchical" else "self-attn")
    measured = measured_flops(model, seq, vision, mode)
    expected = exact_component_flops(enc_cfg, lm_cfg, selection, n_text, mode_name)
    config = {
        "lm_depth": lm_cfg.depth, "d_l": lm_cfg.d_l, "vocab": lm_cfg.vocab_size,
        "enc_depth": enc_cfg.depth, "d_v": enc_cfg.d_v,
        "n_vision_tokens": enc_cfg.n_tokens, "n_text_tokens": n_text,
        "n_selected": selection.n_selected,
    }
    return FlopReport(mode=mode_name, config=config, analytic=analytic,
                      measured=measured, expected=expected)
