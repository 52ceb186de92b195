"""Staged pre-training and the two downstream fine-tuning drivers.

Pre-training unlocks parameter groups progressively:

    stage 1   projector + bridge_xattn      (encoder and LM frozen)
    stage 2   + llm                         (encoder frozen)
    stage 3   + encoder                     (everything)

The injected bridge parameters train from stage 1: they are new, start
random, and are part of the vision-to-LM mapping that stage is meant to
align.  Optimizer state is reset at every stage boundary (the stages also
switch beta2), and while the encoder is frozen its tap outputs per sample
are cached, since they cannot change.

Batches are a pure function of (seed, stage, iteration), so a resumed run
sees exactly the data order of an uninterrupted one.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import ConfigError, DataError, DivergenceError
from .lm import ModeSpec
from .optim import AdamW, StageSchedule, clip_gradients, lr_at
from .serialize import load_named, read_manifest, save_named, write_manifest
from .tensor import Tape, Tensor

PRETRAIN_TRAINABLE = {
    1: ("projector", "bridge_xattn"),
    2: ("projector", "bridge_xattn", "llm"),
    3: ("encoder", "projector", "bridge_xattn", "llm"),
}

_RNG_BATCH = 7


@dataclass
class ParamGroup:
    name: str
    members: dict
    trainable: bool


def desk_schedules(batch_size=32, iters=(300, 600, 80), warmup=(10, 20, 3),
                   peak=(3e-3, 5e-3, 3e-5), minimum=(3e-4, 1e-4, 0.0)):
    """Desk-scale defaults: stage lengths keep the reference ~3% warmup ratio,
    clipping (1, 10, 10) and the per-stage beta2 drop (0.999 -> 0.95); the
    learning rates are sized for from-scratch toy models (stage 3 is a gentle
    end-to-end polish so the fresh encoder updates cannot wreck the aligned
    bridge)."""
    betas = ((0.9, 0.999), (0.9, 0.95), (0.9, 0.95))
    clip = (1.0, 10.0, 10.0)
    return [
        StageSchedule(stage=k + 1, trainable=PRETRAIN_TRAINABLE[k + 1],
                      peak_lr=peak[k], min_lr=minimum[k],
                      warmup_iters=warmup[k], total_iters=iters[k],
                      clip_norm=clip[k], betas=betas[k], weight_decay=0.0,
                      batch_size=batch_size)
        for k in range(3)
    ]


def reference_schedules():
    """The published full-scale three-stage settings, for configs that want
    them verbatim (iteration counts assume web-scale data)."""
    return [
        StageSchedule(1, PRETRAIN_TRAINABLE[1], 1e-3, 1e-4, 70, 2326, 1.0,
                      (0.9, 0.999), 0.0, 256),
        StageSchedule(2, PRETRAIN_TRAINABLE[2], 2e-5, 2e-6, 140, 4652, 10.0,
                      (0.9, 0.95), 0.0, 256),
        StageSchedule(3, PRETRAIN_TRAINABLE[3], 2e-6, 0.0, 18, 581, 10.0,
                      (0.9, 0.95), 0.0, 1024),
    ]


def validate_pretrain_schedules(schedules):
    if len(schedules) != 3:
        raise ConfigError(f"pre-training needs 3 stage schedules, got {len(schedules)}")
    for k, sched in enumerate(schedules, start=1):
        if sched.stage != k:
            raise ConfigError(f"schedule {k} labelled stage {sched.stage}")
        expected = PRETRAIN_TRAINABLE[k]
        if tuple(sched.trainable) != expected:
            raise ConfigError(
                f"stage {k} must train {expected}, got {tuple(sched.trainable)}")


def batch_indices(seed, stage, it, n, batch_size, salt=0):
    """Deterministic batch for one iteration; no replacement within a batch."""
    rng = np.random.default_rng([seed, _RNG_BATCH, salt, stage, it])
    take = min(batch_size, n)
    return rng.choice(n, size=take, replace=False)


class FeatureCache:
    """Per-sample encoder tap values, valid while the encoder is frozen."""

    def __init__(self, model):
        self.model = model
        self.store = {}

    def taps(self, idx, image):
        arrays = self.store.get(idx)
        if arrays is None:
            feats = self.model.encode_image(image)
            arrays = [tap.data.copy() for tap in feats.taps]
            self.store[idx] = arrays
        return [Tensor(a, dtype=self.model.dtype) for a in arrays]

    def clear(self):
        self.store.clear()


class MetricsLog:
    """CSV sink: iter,stage,lr,loss,grad_norm."""

    def __init__(self, path=None, append=False):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path and not append:
            self.path.write_text("iter,stage,lr,loss,grad_norm\n", encoding="utf-8")

    def append(self, it, stage, lr, loss, grad_norm):
        row = (it, stage, lr, loss, grad_norm)
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(f"{it},{stage},{lr:.10g},{loss:.10g},{grad_norm:.10g}\n")


def _caption_batch_loss(model, dataset, idxs, mode, cache):
    losses = []
    for idx in idxs:
        sample = dataset.samples[int(idx)]
        if mode.mode == "plain":
            vision = None
        elif cache is not None:
            vision = cache.taps(int(idx), sample.image)
        else:
            vision = sample.image
        losses.append(model.loss(sample.sequence, vision, mode))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.mul(total, 1.0 / len(losses))


def train_stage(model, dataset, sched, mode, seed, metrics=None, opt=None,
                start_iter=0, global_iter0=0, cache=None, salt=0):
    """Run one stage's iterations; returns (optimizer, final global iter)."""
    model.set_trainable(sched.trainable)
    if opt is None:
        opt = AdamW(model.trainable_params(), betas=sched.betas)
    n = len(dataset.samples)
    for it in range(start_iter, sched.total_iters):
        lr = lr_at(it, sched)
        opt.zero_grads()
        idxs = batch_indices(seed, sched.stage, it, n, sched.batch_size, salt=salt)
        with Tape() as tape:
            loss = _caption_batch_loss(model, dataset, idxs, mode, cache)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at stage {sched.stage} iteration {it}")
            tape.backward(loss)
        grad_norm = clip_gradients(opt.params, sched.clip_norm)
        opt.step(lr, sched.weight_decay)
        if metrics is not None:
            metrics.append(global_iter0 + it, sched.stage, lr, loss_val, grad_norm)
    return opt, global_iter0 + sched.total_iters


def mean_dataset_loss(model, dataset, mode):
    """Average per-token loss over the whole dataset, no gradients."""
    total = 0.0
    for sample in dataset.samples:
        vision = None if mode.mode == "plain" else sample.image
        total += float(model.loss(sample.sequence, vision, mode).data)
    return total / len(dataset.samples)


def save_checkpoint(path, model, stage, next_iter, seed, opt=None, tokenizer=None,
                    extra=None):
    """params + manifest (+ optimizer state and vocabulary) in one directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_named(path / "params.pvm", model.named_arrays())
    if opt is not None:
        save_named(path / "optim.pvm", opt.state_arrays())
    if tokenizer is not None:
        tokenizer.save(path / "vocab.txt")
    fields = {
        "version": f"picovlm-{__version__}",
        "seed": seed,
        "stage": stage,
        "next_iter": next_iter,
        "selection.strategy": model.selection.strategy,
        "selection.density": model.selection.density,
        "selection.pairs": ";".join(f"{a},{b}" for a, b in model.selection.pairs),
        "encoder.image_h": model.enc_cfg.image_h,
        "encoder.image_w": model.enc_cfg.image_w,
        "encoder.channels": model.enc_cfg.channels,
        "encoder.patch_size": model.enc_cfg.patch_size,
        "encoder.d_v": model.enc_cfg.d_v,
        "encoder.depth": model.enc_cfg.depth,
        "encoder.heads": model.enc_cfg.heads,
        "encoder.use_class_token": model.enc_cfg.use_class_token,
        "lm.vocab_size": model.lm_cfg.vocab_size,
        "lm.d_l": model.lm_cfg.d_l,
        "lm.depth": model.lm_cfg.depth,
        "lm.heads": model.lm_cfg.heads,
        "lm.max_seq": model.lm_cfg.max_seq,
        "precision": "high" if model.dtype == T.HIGH else "standard",
        "blas_threads": os.environ.get("OMP_NUM_THREADS", "default"),
    }
    for key, value in (extra or {}).items():
        fields[key] = value
    write_manifest(path / "manifest.txt", fields)
    return path


def load_model_from_checkpoint(path):
    """Rebuild a VisionLanguageModel from a checkpoint directory."""
    from .encoder import EncoderConfig, LayerSelection
    from .lm import LMConfig
    from .model import VisionLanguageModel

    path = Path(path)
    fields = read_manifest(path / "manifest.txt")
    enc_cfg = EncoderConfig(
        image_h=int(fields["encoder.image_h"]),
        image_w=int(fields["encoder.image_w"]),
        channels=int(fields["encoder.channels"]),
        patch_size=int(fields["encoder.patch_size"]),
        d_v=int(fields["encoder.d_v"]),
        depth=int(fields["encoder.depth"]),
        heads=int(fields["encoder.heads"]),
        use_class_token=fields["encoder.use_class_token"] == "True",
    )
    lm_cfg = LMConfig(
        vocab_size=int(fields["lm.vocab_size"]),
        d_l=int(fields["lm.d_l"]),
        depth=int(fields["lm.depth"]),
        heads=int(fields["lm.heads"]),
        max_seq=int(fields["lm.max_seq"]),
    )
    pairs = [tuple(int(v) for v in pair.split(","))
             for pair in fields["selection.pairs"].split(";")]
    selection = LayerSelection(float(fields["selection.density"]),
                               fields["selection.strategy"], pairs)
    dtype = T.HIGH if fields.get("precision") == "high" else T.STANDARD
    model = VisionLanguageModel(enc_cfg, lm_cfg, selection,
                                seed=int(fields["seed"]), dtype=dtype)
    model.load_arrays(load_named(path / "params.pvm"))
    return model, fields


def run_pretrain(model, dataset, schedules, out_dir, seed, resume_from=None,
                 metrics_name="metrics.csv"):
    """Execute stages 1..3 in order; one checkpoint directory per stage.

    `resume_from` may point at any checkpoint this function wrote (stage
    checkpoints carry optimizer state), in which case completed stages are
    skipped and the interrupted stage continues at its recorded iteration.
    """
    validate_pretrain_schedules(schedules)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = ModeSpec("hierarchical", selection=model.selection)

    resume_stage, resume_iter, resume_opt_arrays = 1, 0, None
    if resume_from is not None:
        loaded, fields = load_model_from_checkpoint(resume_from)
        model.load_arrays(loaded.named_arrays())
        resume_stage = int(fields["stage"])
        resume_iter = int(fields["next_iter"])
        opt_path = Path(resume_from) / "optim.pvm"
        if opt_path.exists() and resume_iter > 0:
            resume_opt_arrays = load_named(opt_path)
        if resume_iter >= schedules[resume_stage - 1].total_iters:
            resume_stage += 1
            resume_iter = 0
            resume_opt_arrays = None

    metrics_path = out_dir / metrics_name
    metrics = MetricsLog(metrics_path, append=resume_from is not None and metrics_path.exists())

    stage_losses = {}
    checkpoints = []
    for sched in schedules:
        if sched.stage < resume_stage:
            checkpoints.append(out_dir / f"stage{sched.stage}")
            continue
        start_iter = resume_iter if sched.stage == resume_stage else 0
        stage_offset = sum(s.total_iters for s in schedules[:sched.stage - 1])
        model.set_trainable(sched.trainable)
        opt = AdamW(model.trainable_params(), betas=sched.betas)
        if sched.stage == resume_stage and resume_opt_arrays is not None:
            opt.load_state_arrays(resume_opt_arrays)
        cache = FeatureCache(model) if "encoder" not in sched.trainable else None
        t0 = time.time()
        train_stage(
            model, dataset, sched, mode, seed, metrics=metrics, opt=opt,
            start_iter=start_iter, global_iter0=stage_offset, cache=cache)
        stage_losses[sched.stage] = mean_dataset_loss(model, dataset, mode)
        ckpt = save_checkpoint(
            out_dir / f"stage{sched.stage}", model, sched.stage,
            sched.total_iters, seed, opt=opt, tokenizer=dataset.tokenizer,
            extra={"stage_train_loss": f"{stage_losses[sched.stage]:.6f}",
                   "stage_seconds": f"{time.time() - t0:.1f}"})
        checkpoints.append(ckpt)
    manifest = {
        "version": f"picovlm-{__version__}",
        "seed": seed,
        "stage_order": "1,2,3",
        "blas_threads": os.environ.get("OMP_NUM_THREADS", "default"),
    }
    for sched in schedules:
        prefix = f"stage{sched.stage}"
        manifest[f"{prefix}.trainable"] = ",".join(sched.trainable)
        manifest[f"{prefix}.peak_lr"] = sched.peak_lr
        manifest[f"{prefix}.min_lr"] = sched.min_lr
        manifest[f"{prefix}.warmup_iters"] = sched.warmup_iters
        manifest[f"{prefix}.total_iters"] = sched.total_iters
        manifest[f"{prefix}.clip_norm"] = sched.clip_norm
        manifest[f"{prefix}.betas"] = f"{sched.betas[0]},{sched.betas[1]}"
        manifest[f"{prefix}.weight_decay"] = sched.weight_decay
        manifest[f"{prefix}.batch_size"] = sched.batch_size
        if sched.stage in stage_losses:
            manifest[f"{prefix}.final_train_loss"] = f"{stage_losses[sched.stage]:.6f}"
    write_manifest(out_dir / "manifest.txt", manifest)
    return checkpoints, stage_losses


# ---------------------------------------------------------------------------
# Downstream drivers


_SALT_CLS = 1
_SALT_VLM = 2
_RNG_AUG = 9
_RNG_HEAD = 3


class ClassifierHead:
    """Single linear layer over pooled final-layer encoder features."""

    def __init__(self, d_v, num_classes, seed=0, dtype=T.STANDARD):
        rng = np.random.default_rng([seed, _RNG_HEAD])
        self.w = T.normal_param(rng, (d_v, num_classes), dtype=dtype)
        self.b = T.zeros((num_classes,), dtype=dtype, requires_grad=True)
        self.num_classes = num_classes

    def logits_row(self, pooled):
        """[d_v] pooled feature -> [1, num_classes] logit row."""
        return T.add(T.matmul(T.reshape(pooled, (1, pooled.shape[0])), self.w), self.b)

    def named_params(self, prefix="classifier_head"):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def param_count(self):
        return self.w.size + self.b.size


def classifier_schedule(total_iters=200, batch_size=16, steps_per_epoch=None,
                        peak_lr=2e-4, weight_decay=0.01, clip_norm=3.0):
    """Head fine-tuning defaults: AdamW(0.9, 0.999), cosine to 0, warmup of
    1.5 epochs, decay 0.01, clip 3."""
    if steps_per_epoch is None:
        steps_per_epoch = max(1, total_iters // 10)
    warmup = min(total_iters, int(round(1.5 * steps_per_epoch)))
    return StageSchedule(stage=1, trainable=("classifier_head",),
                         peak_lr=peak_lr, min_lr=0.0, warmup_iters=warmup,
                         total_iters=total_iters, clip_norm=clip_norm,
                         betas=(0.9, 0.999), weight_decay=weight_decay,
                         batch_size=batch_size)


def _pooled_features(encoder, image, use_class_token):
    tokens = encoder.patchify(image)
    x = tokens.tokens
    for l in range(1, encoder.depth + 1):
        x = encoder.blocks[l - 1](x, mask=None, scope="enc")
    if use_class_token:
        return T.reshape(T.slice_rows(x, 0, 1), (x.shape[1],))
    return T.mean_rows(x)


def classifier_accuracy(encoder, head, samples, use_class_token=False):
    """Fraction of clean samples whose argmax logit matches the label."""
    hits = 0
    for sample in samples:
        pooled = _pooled_features(encoder, sample.image, use_class_token)
        logits = head.logits_row(pooled)
        hits += int(np.argmax(logits.data[0]) == sample.label)
    return hits / len(samples)


def finetune_classifier(encoder, samples, num_classes, schedule=None, seed=0,
                        augment=True, metrics=None, eval_every=10):
    """Train a linear head on frozen encoder features.

    The encoder is frozen for the whole run (bitwise, not just small-lr).
    Augmentation (random resized crop + horizontal flip) is deterministic
    per (seed, epoch, sample).  Stops early once clean train accuracy hits
    1.0.  Returns (head, accuracy, steps_used).
    """
    from .data import augment_image

    sched = schedule or classifier_schedule()
    if tuple(sched.trainable) != ("classifier_head",):
        raise ConfigError("classifier fine-tuning trains only the classifier head")
    for sample in samples:
        if sample.label is None or not 0 <= sample.label < num_classes:
            raise DataError(f"label {sample.label!r} outside [0, {num_classes})")

    for _, p in encoder.named_params():
        p.requires_grad = False
    use_cls = encoder.cfg.use_class_token
    head = ClassifierHead(encoder.cfg.d_v, num_classes, seed=seed, dtype=encoder.dtype)
    params = dict(head.named_params())
    opt = AdamW(params, betas=sched.betas)
    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / sched.batch_size))

    steps_used = sched.total_iters
    for it in range(sched.total_iters):
        lr = lr_at(it, sched)
        opt.zero_grads()
        idxs = batch_indices(seed, sched.stage, it, n, sched.batch_size, salt=_SALT_CLS)
        epoch = it // steps_per_epoch
        with Tape() as tape:
            rows = []
            labels = []
            for idx in idxs:
                sample = samples[int(idx)]
                image = sample.image
                if augment:
                    rng = np.random.default_rng([seed, _RNG_AUG, epoch, int(idx)])
                    image = augment_image(image, rng)
                pooled = _pooled_features(encoder, image, use_cls)
                rows.append(head.logits_row(pooled))
                labels.append(sample.label)
            logits = rows[0]
            for row in rows[1:]:
                logits = T.concat_rows(logits, row)
            loss = T.cross_entropy_next_token(logits, labels, ignore_index=-1)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite classifier loss at iteration {it}")
            tape.backward(loss)
        grad_norm = clip_gradients(params, sched.clip_norm)
        opt.step(lr, sched.weight_decay)
        if metrics is not None:
            metrics.append(it, sched.stage, lr, loss_val, grad_norm)
        if (it + 1) % eval_every == 0:
            if classifier_accuracy(encoder, head, samples, use_cls) == 1.0:
                steps_used = it + 1
                break

    accuracy = classifier_accuracy(encoder, head, samples, use_cls)
    return head, accuracy, steps_used


def vlm_schedules(batch_size=8, iters=(150, 300), warmup=(5, 9),
                  peak=(3e-3, 3e-3)):
    """Two-pass downstream fine-tune: (a) projector only, (b) LM only.
    Warmup ratios (~3%) and clipping follow the reference tables; rates are
    desk-scale."""
    return [
        StageSchedule(stage=1, trainable=("projector",), peak_lr=peak[0],
                      min_lr=0.0, warmup_iters=warmup[0], total_iters=iters[0],
                      clip_norm=1.0, betas=(0.9, 0.999), weight_decay=0.0,
                      batch_size=batch_size),
        StageSchedule(stage=2, trainable=("llm",), peak_lr=peak[1],
                      min_lr=0.0, warmup_iters=warmup[1], total_iters=iters[1],
                      clip_norm=1.0, betas=(0.9, 0.999), weight_decay=0.0,
                      batch_size=batch_size),
    ]


def finetune_vlm(model, dataset, schedules=None, out_dir=None, seed=0):
    """Token-concatenation fine-tune: projector pass, then LM pass.

    The encoder stays frozen throughout, so its features are cached per
    sample.  Returns (checkpoint path or None, per-pass train losses).
    """
    schedules = schedules or vlm_schedules()
    if len(schedules) != 2:
        raise ConfigError("VLM fine-tuning takes exactly two sub-stage schedules")
    if tuple(schedules[0].trainable) != ("projector",):
        raise ConfigError("VLM sub-stage (a) trains only the projector")
    if tuple(schedules[1].trainable) != ("llm",):
        raise ConfigError("VLM sub-stage (b) trains only the llm group")

    mode = ModeSpec("concat")
    cache = FeatureCache(model)
    metrics = MetricsLog(Path(out_dir) / "vlm_metrics.csv" if out_dir else None)
    losses = {}
    offset = 0
    for sched in schedules:
        train_stage(model, dataset, sched, mode, seed, metrics=metrics,
                    global_iter0=offset, cache=cache, salt=_SALT_VLM)
        offset += sched.total_iters
        losses[sched.stage] = mean_dataset_loss(model, dataset, mode)
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(Path(out_dir) / "vlm", model, schedules[-1].stage,
                               schedules[-1].total_iters, seed,
                               tokenizer=dataset.tokenizer,
                               extra={"finetune": "vlm-concat"})
    return ckpt, losses
