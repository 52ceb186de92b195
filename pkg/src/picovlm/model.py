"""The combined vision-language model and its three operating modes.

plain         text-only causal decoding, vision untouched.
hierarchical  each selected encoder depth is projected and injected into
              its mapped LM depth through a gated cross-attention block.
concat        the designated tap's projected tokens are prepended to the
              embedded text sequence and processed by ordinary causal
              self-attention (the downstream / baseline wiring).

Parameters are organised into named groups (encoder, projector,
bridge_xattn, llm) so the staged trainer can freeze and unfreeze them
wholesale.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .bridge import CrossAttentionBlock, Projector
from .encoder import HierarchicalFeatures, VisionEncoder, VisualTokens
from .errors import ConfigError, TruncationError, WiringError
from .lm import IGNORE, LanguageModel, ModeSpec, TokenSequence
from .tensor import Tensor

RNG_INIT = 1
GROUPS = ("encoder", "projector", "bridge_xattn", "llm")


class VisionLanguageModel:
    def __init__(self, enc_cfg, lm_cfg, selection, seed=0, dtype=T.STANDARD):
        for enc_l, llm_l in selection.pairs:
            if not 1 <= enc_l <= enc_cfg.depth:
                raise ConfigError(f"selected encoder layer {enc_l} outside 1..{enc_cfg.depth}")
            if not 1 <= llm_l <= lm_cfg.depth:
                raise ConfigError(f"mapped llm layer {llm_l} outside 1..{lm_cfg.depth}")
        rng = np.random.default_rng([seed, RNG_INIT])
        self.enc_cfg = enc_cfg
        self.lm_cfg = lm_cfg
        self.selection = selection
        self.seed = seed
        self.dtype = dtype
        self.encoder = VisionEncoder(enc_cfg, rng, dtype)
        self.projectors = [
            Projector(rng, enc_cfg.d_v, lm_cfg.d_l, dtype) for _ in selection.pairs
        ]
        self.xattn = [
            CrossAttentionBlock(rng, lm_cfg.d_l, lm_cfg.heads, dtype) for _ in selection.pairs
        ]
        # position table sized for the longest concat sequence
        self.lm = LanguageModel(
            lm_cfg, rng, dtype, n_positions=lm_cfg.max_seq + enc_cfg.n_tokens)

    # -- vision side -------------------------------------------------------

    def encode_image(self, image, keep_all=False, stop_grad_after=None):
        tokens = self.encoder.patchify(image)
        return self.encoder.encode_hierarchical(
            tokens, self.selection, keep_all=keep_all, stop_grad_after=stop_grad_after)

    def _taps_from(self, vision, keep_all=False, stop_grad_after=None):
        """Normalise the vision argument to a rank-aligned list of tap tensors."""
        if vision is None:
            return None, None
        if isinstance(vision, HierarchicalFeatures):
            return vision.taps, vision
        if isinstance(vision, (list, tuple)):
            taps = [t if isinstance(t, Tensor) else Tensor(t, dtype=self.dtype) for t in vision]
            return taps, None
        if isinstance(vision, VisualTokens):
            feats = self.encoder.encode_hierarchical(
                vision, self.selection, keep_all=keep_all, stop_grad_after=stop_grad_after)
            return feats.taps, feats
        feats = self.encode_image(vision, keep_all=keep_all, stop_grad_after=stop_grad_after)
        return feats.taps, feats

    def project_rank(self, taps, rank):
        return self.projectors[rank](taps[rank])

    # -- forward -----------------------------------------------------------

    def forward(self, seq, vision=None, mode=None, attn_sinks=None,
                keep_all=False, stop_grad_after=None, return_features=False):
        """Logits for one sequence; [N_t x V], or [(prefix+N_t) x V] in concat mode."""
        mode = mode or ModeSpec("plain")
        if len(seq.ids) > self.lm_cfg.max_seq:
            raise TruncationError(
                f"sequence of {len(seq.ids)} tokens exceeds max_seq={self.lm_cfg.max_seq}")
        taps, feats = self._taps_from(vision, keep_all, stop_grad_after)

        if mode.mode == "plain":
            hidden = self.lm.forward_hidden(self.lm.embed(seq.ids))
            logits = self.lm.logits(hidden)
        elif mode.mode == "hierarchical":
            if taps is None:
                raise WiringError("hierarchical mode needs vision input")
            if len(taps) != len(self.selection.pairs):
                raise WiringError(
                    f"got {len(taps)} taps for {len(self.selection.pairs)} selected pairs")
            injections = {}
            for rank, (_, llm_layer) in enumerate(self.selection.pairs):
                kv = self.projectors[rank](taps[rank])
                sink = attn_sinks[rank] if attn_sinks is not None else None
                block = self.xattn[rank]
                injections[llm_layer] = (
                    lambda h, b=block, k=kv, s=sink: b(h, k, attn_sink=s))
            hidden = self.lm.forward_hidden(self.lm.embed(seq.ids), injections)
            logits = self.lm.logits(hidden)
        elif mode.mode == "concat":
            if taps is None:
                raise WiringError("concat mode needs vision input")
            rank = mode.concat_rank if mode.concat_rank >= 0 else len(self.projectors) - 1
            if not 0 <= rank < len(self.projectors):
                raise WiringError(f"concat rank {rank} has no projector")
            prefix = self.projectors[rank](taps[rank])
            n_prefix = prefix.shape[0]
            prefix = T.add(prefix, T.slice_rows(self.lm.pos_emb, 0, n_prefix))
            text = self.lm.embed(seq.ids, offset=n_prefix)
            hidden = self.lm.forward_hidden(T.concat_rows(prefix, text))
            logits = self.lm.logits(hidden)
        else:
            raise WiringError(f"unknown mode {mode.mode!r}")

        if return_features:
            return logits, feats
        return logits

    def loss(self, seq, vision=None, mode=None, attn_sinks=None,
             keep_all=False, stop_grad_after=None, return_features=False):
        """Mean next-token cross-entropy in nats over non-ignored positions."""
        mode = mode or ModeSpec("plain")
        out = self.forward(seq, vision, mode, attn_sinks, keep_all,
                           stop_grad_after, return_features=True)
        logits, feats = out
        targets = list(seq.targets)
        if mode.mode == "concat":
            targets = [IGNORE] * (logits.shape[0] - len(seq.ids)) + targets
        loss = T.cross_entropy_next_token(logits, targets, ignore_index=IGNORE)
        if return_features:
            return loss, feats
        return loss

    def generate_greedy(self, prompt, vision=None, mode=None, max_new=16, stop_id=None):
        """Argmax decoding; ties resolve to the lowest token id.

        The prompt plus everything generated must fit max_seq; asking for
        more is a truncation error up front.
        """
        mode = mode or ModeSpec("plain")
        if len(prompt.ids) < 1:
            raise WiringError("generation needs a non-empty prompt")
        if len(prompt.ids) + max_new > self.lm_cfg.max_seq:
            raise TruncationError(
                f"prompt of {len(prompt.ids)} + {max_new} new tokens exceeds "
                f"max_seq={self.lm_cfg.max_seq}")
        taps, _ = self._taps_from(vision)
        tap_values = [t.detach() for t in taps] if taps is not None else None
        ids = list(prompt.ids)
        for _ in range(max_new):
            seq = TokenSequence.for_ids(ids)
            logits = self.forward(seq, tap_values, mode)
            next_id = int(np.argmax(logits.data[-1]))
            ids.append(next_id)
            if stop_id is not None and next_id == stop_id:
                break
        return TokenSequence.for_ids(ids, prompt_len=len(prompt.ids))

    # -- parameter bookkeeping ----------------------------------------------

    def param_groups(self):
        groups = {name: {} for name in GROUPS}
        groups["encoder"].update(self.encoder.named_params("encoder"))
        for r, proj in enumerate(self.projectors):
            groups["projector"].update(proj.named_params(f"projector.{r}"))
        for r, blk in enumerate(self.xattn):
            groups["bridge_xattn"].update(blk.named_params(f"bridge_xattn.{r}"))
        groups["llm"].update(self.lm.named_params("llm"))
        return groups

    def named_params(self):
        out = {}
        for params in self.param_groups().values():
            out.update(params)
        return out

    def named_arrays(self):
        return {name: p.data for name, p in self.named_params().items()}

    def load_arrays(self, named):
        params = self.named_params()
        missing = set(params) - set(named)
        extra = set(named) - set(params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint mismatch: missing {sorted(missing)[:3]}..., extra {sorted(extra)[:3]}...")
        for name, param in params.items():
            arr = named[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {param.shape}")
            param.data = arr.astype(param.dtype)

    def set_trainable(self, group_names):
        """Mark exactly the given groups trainable; everything else frozen."""
        group_names = set(group_names)
        unknown = group_names - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        for gname, params in self.param_groups().items():
            flag = gname in group_names
            for p in params.values():
                p.requires_grad = flag

    def trainable_params(self):
        return {name: p for name, p in self.named_params().items() if p.requires_grad}
