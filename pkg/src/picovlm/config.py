"""Flat key=value run configuration with section prefixes.

Example::

    seed=0
    precision=standard
    encoder.image_h=32
    encoder.d_v=64
    lm.d_l=64
    selection.density=0.25
    selection.strategy=uniform
    data.kind=synthetic-captions
    data.n=32
    stage1.peak_lr=3e-3

Unset keys fall back to the desk-scale defaults below.  `#` starts a
comment.  The canonical serialisation (sorted keys) is hashed into run
manifests so a run can be tied to its exact configuration.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .encoder import EncoderConfig, select_layers
from .errors import ConfigError
from .lm import LMConfig
from .model import VisionLanguageModel
from .optim import StageSchedule
from .training import classifier_schedule, desk_schedules, vlm_schedules
from . import tensor as T

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_config_text(text):
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


class RunConfig:
    def __init__(self, fields=None):
        self.fields = dict(fields or {})

    @classmethod
    def from_file(cls, path):
        return cls(parse_config_text(Path(path).read_text(encoding="utf-8")))

    def get(self, key, default=None, cast=str):
        raw = self.fields.get(key)
        if raw is None:
            return default
        if cast is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ConfigError(f"config {key}: expected a boolean, got {raw!r}")
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"config {key}: cannot parse {raw!r}") from exc

    def canonical_text(self):
        return "\n".join(f"{k}={self.fields[k]}" for k in sorted(self.fields)) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:12]

    # -- builders -----------------------------------------------------------

    @property
    def seed(self):
        return self.get("seed", 0, int)

    @property
    def dtype(self):
        name = self.get("precision", "standard")
        if name == "standard":
            return T.STANDARD
        if name == "high":
            return T.HIGH
        raise ConfigError(f"precision must be standard or high, got {name!r}")

    def encoder_config(self):
        return EncoderConfig(
            image_h=self.get("encoder.image_h", 32, int),
            image_w=self.get("encoder.image_w", 32, int),
            channels=self.get("encoder.channels", 3, int),
            patch_size=self.get("encoder.patch_size", 4, int),
            d_v=self.get("encoder.d_v", 64, int),
            depth=self.get("encoder.depth", 8, int),
            heads=self.get("encoder.heads", 4, int),
            use_class_token=self.get("encoder.use_class_token", False, bool),
        )

    def lm_config(self, vocab_size=None):
        vocab = vocab_size if vocab_size is not None else self.get("lm.vocab_size", 320, int)
        return LMConfig(
            vocab_size=vocab,
            d_l=self.get("lm.d_l", 64, int),
            depth=self.get("lm.depth", 4, int),
            heads=self.get("lm.heads", 4, int),
            max_seq=self.get("lm.max_seq", 77, int),
        )

    def selection(self, enc_depth=None, lm_depth=None):
        return select_layers(
            enc_depth if enc_depth is not None else self.get("encoder.depth", 8, int),
            lm_depth if lm_depth is not None else self.get("lm.depth", 4, int),
            self.get("selection.density", 0.25, float),
            self.get("selection.strategy", "uniform"),
        )

    def model(self, vocab_size=None):
        enc_cfg = self.encoder_config()
        lm_cfg = self.lm_config(vocab_size)
        return VisionLanguageModel(
            enc_cfg, lm_cfg, self.selection(enc_cfg.depth, lm_cfg.depth),
            seed=self.seed, dtype=self.dtype)

    def _stage_override(self, base, prefix):
        beta1 = self.get(f"{prefix}.beta1", base.betas[0], float)
        beta2 = self.get(f"{prefix}.beta2", base.betas[1], float)
        return StageSchedule(
            stage=base.stage,
            trainable=base.trainable,
            peak_lr=self.get(f"{prefix}.peak_lr", base.peak_lr, float),
            min_lr=self.get(f"{prefix}.min_lr", base.min_lr, float),
            warmup_iters=self.get(f"{prefix}.warmup_iters", base.warmup_iters, int),
            total_iters=self.get(f"{prefix}.total_iters", base.total_iters, int),
            clip_norm=self.get(f"{prefix}.clip_norm", base.clip_norm, float),
            betas=(beta1, beta2),
            weight_decay=self.get(f"{prefix}.weight_decay", base.weight_decay, float),
            batch_size=self.get(f"{prefix}.batch_size", base.batch_size, int),
        )

    def pretrain_schedules(self):
        base = desk_schedules(batch_size=self.get("train.batch_size", 32, int))
        return [self._stage_override(base[k], f"stage{k + 1}") for k in range(3)]

    def cls_schedule(self):
        base = classifier_schedule(
            total_iters=self.get("cls.total_iters", 200, int),
            batch_size=self.get("cls.batch_size", 16, int),
        )
        return self._stage_override(base, "cls")

    def vlm_sub_schedules(self):
        base = vlm_schedules(batch_size=self.get("train.batch_size", 16, int))
        return [self._stage_override(base[0], "vlm_a"),
                self._stage_override(base[1], "vlm_b")]

    def dataset(self):
        from .data import CaptionDataset, gen_classification, gen_synthetic, load_dataset

        enc_cfg = self.encoder_config()
        kind = self.get("data.kind", "synthetic-captions")
        seed = self.get("data.seed", self.seed, int)
        max_seq = self.get("lm.max_seq", 77, int)
        if kind == "synthetic-captions":
            return gen_synthetic(self.get("data.n", 32, int), seed,
                                 enc_cfg.image_h, enc_cfg.image_w, enc_cfg.channels,
                                 max_seq=max_seq)
        if kind == "synthetic-classify":
            return gen_classification(self.get("data.n", 64, int), seed,
                                      enc_cfg.image_h, enc_cfg.image_w, enc_cfg.channels)
        if kind == "files":
            path = self.get("data.path")
            if not path:
                raise ConfigError("data.kind=files needs data.path")
            return load_dataset(path, enc_cfg.image_h, enc_cfg.image_w,
                                enc_cfg.channels, max_seq=max_seq)
        raise ConfigError(f"unknown data.kind {kind!r}")
