"""Patch-tokenizing vision transformer with hierarchical layer taps.

The encoder runs a stack of pre-norm blocks and can retain the output of
any subset of depths ("taps").  Which depths are tapped, and which language
model depths they feed, is a `LayerSelection` produced by `select_layers`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import Linear, TransformerBlock
from .errors import ConfigError, SelectionError, ShapeError
from .tensor import Tensor, mac_scope

STRATEGIES = ("uniform", "tail", "final-only")


@dataclass
class EncoderConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 4
    d_v: int = 64
    depth: int = 8
    heads: int = 4
    use_class_token: bool = False

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {self.patch_size}")
        if self.d_v % self.heads:
            raise ConfigError(f"d_v={self.d_v} not divisible by heads={self.heads}")

    @property
    def n_patches(self):
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def n_tokens(self):
        return self.n_patches + (1 if self.use_class_token else 0)

    @property
    def grid(self):
        return (self.image_h // self.patch_size, self.image_w // self.patch_size)


@dataclass
class VisualTokens:
    tokens: Tensor
    n_patches: int


@dataclass
class LayerSelection:
    """Tapped encoder depths paired with the LM depths they feed."""

    density: float
    strategy: str
    pairs: list  # ordered (encoder_layer, llm_layer), both 1-indexed

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SelectionError(f"unknown strategy {self.strategy!r}")
        enc = [p[0] for p in self.pairs]
        llm = [p[1] for p in self.pairs]
        if enc != sorted(set(enc)) or llm != sorted(set(llm)):
            raise SelectionError(f"layer pairs must be strictly increasing, got {self.pairs}")
        if self.strategy == "final-only" and len(self.pairs) != 1:
            raise SelectionError("final-only selection must contain exactly one pair")

    @property
    def n_selected(self):
        return len(self.pairs)

    @property
    def encoder_layers(self):
        return [p[0] for p in self.pairs]

    @property
    def llm_layers(self):
        return [p[1] for p in self.pairs]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def select_layers(depth_enc, depth_llm, density, strategy):
    """Choose taps at a fraction `density` of encoder depths.

    uniform: every depth_enc/L_s-th layer counted from the deep end, so the
    final layer is always included.  tail: the last L_s layers.  final-only:
    the single final layer (the cascaded baseline; its recorded density is
    the effective 1/depth_enc).  LM injection depths follow the same
    proportional rule, round_half_up(rank * depth_llm / L_s).
    """
    if depth_enc < 1 or depth_llm < 1:
        raise SelectionError(f"depths must be positive, got {depth_enc}, {depth_llm}")
    if not 0.0 < density <= 1.0:
        raise SelectionError(f"density must be in (0, 1], got {density}")
    if strategy == "final-only":
        return LayerSelection(1.0 / depth_enc, strategy, [(depth_enc, depth_llm)])

    n_sel = max(1, _round_half_up(density * depth_enc))
    if strategy == "uniform":
        enc = [_round_half_up(i * depth_enc / n_sel) for i in range(1, n_sel + 1)]
    elif strategy == "tail":
        enc = list(range(depth_enc - n_sel + 1, depth_enc + 1))
    else:
        raise SelectionError(f"unknown strategy {strategy!r}")
    llm = [_round_half_up(i * depth_llm / n_sel) for i in range(1, n_sel + 1)]

    enc = [min(max(e, 1), depth_enc) for e in enc]
    llm = [min(max(m, 1), depth_llm) for m in llm]
    pairs = list(dict.fromkeys(zip(enc, llm)))
    if len(pairs) < n_sel:
        raise SelectionError(
            f"selection collapsed to {len(pairs)} pairs, expected {n_sel} "
            f"(depths {depth_enc}/{depth_llm} too shallow for density {density})")
    return LayerSelection(density, strategy, pairs)


@dataclass
class HierarchicalFeatures:
    """Retained per-layer encoder outputs for one image."""

    selection: LayerSelection
    taps: list                 # rank-aligned with selection.pairs
    layers: dict = field(default_factory=dict)  # layer index -> Tensor, if kept
    tokens: Tensor = None      # patch embedding output (depth 0)


class VisionEncoder:
    def __init__(self, cfg: EncoderConfig, rng, dtype=T.STANDARD):
        self.cfg = cfg
        self.dtype = dtype
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_proj = Linear(rng, patch_dim, cfg.d_v, dtype)
        self.pos = T.normal_param(rng, (cfg.n_tokens, cfg.d_v), dtype=dtype)
        self.class_token = (
            T.normal_param(rng, (1, cfg.d_v), dtype=dtype) if cfg.use_class_token else None
        )
        self.blocks = [TransformerBlock(rng, cfg.d_v, cfg.heads, dtype) for _ in range(cfg.depth)]

    @property
    def depth(self):
        return self.cfg.depth

    def patchify(self, image):
        """[H, W, C] image -> VisualTokens of shape [n_tokens, d_v].

        Patches are flattened row-major, linearly projected, and given a
        learned absolute position; the class token, when enabled, is
        prepended at row 0.
        """
        cfg = self.cfg
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image), dtype=self.dtype)
        if image.shape != (cfg.image_h, cfg.image_w, cfg.channels):
            raise ShapeError(
                f"image shape {image.shape} does not match config "
                f"({cfg.image_h}, {cfg.image_w}, {cfg.channels})")
        p = cfg.patch_size
        gh, gw = cfg.grid
        x = T.reshape(image, (gh, p, gw, p, cfg.channels))
        x = T.permute(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (cfg.n_patches, p * p * cfg.channels))
        with mac_scope("embed"):
            tok = self.patch_proj(x)
        if self.class_token is not None:
            tok = T.concat_rows(self.class_token, tok)
        tok = T.add(tok, self.pos)
        return VisualTokens(tokens=tok, n_patches=cfg.n_patches)

    def block_forward(self, layer, x):
        """Apply block `layer` (1-indexed) once; used by recurrence checks."""
        return self.blocks[layer - 1](x, mask=None, scope="enc")

    def encode_hierarchical(self, tokens, selection, keep_all=False, stop_grad_after=None):
        """Run all blocks, retaining the tapped layer outputs.

        `stop_grad_after=k` cuts the backbone gradient between blocks k and
        k+1; tap tensors are captured before the cut, so their direct
        gradient paths stay live.
        """
        if isinstance(tokens, VisualTokens):
            x = tokens.tokens
        else:
            x = tokens
        wanted = set(selection.encoder_layers)
        bad = [l for l in wanted if not 1 <= l <= self.depth]
        if bad:
            raise SelectionError(f"selected encoder layers {bad} outside 1..{self.depth}")
        taps_by_layer = {}
        layers = {}
        f0 = x
        for l in range(1, self.depth + 1):
            x = self.blocks[l - 1](x, mask=None, scope="enc")
            if l in wanted:
                taps_by_layer[l] = x
            if keep_all:
                layers[l] = x
            if stop_grad_after is not None and l == stop_grad_after:
                x = T.stop_gradient(x)
        taps = [taps_by_layer[l] for l in selection.encoder_layers]
        return HierarchicalFeatures(selection=selection, taps=taps, layers=layers, tokens=f0)

    def named_params(self, prefix="encoder"):
        yield from self.patch_proj.named_params(f"{prefix}.patch_proj")
        yield f"{prefix}.pos", self.pos
        if self.class_token is not None:
            yield f"{prefix}.class_token", self.class_token
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.blocks.{i}")
