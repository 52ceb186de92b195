"""Command-line surface.

    picovlm gen-data      --config c.cfg --out data/
    picovlm pretrain      --config c.cfg --out run1/ [--resume ckpt/]
    picovlm finetune-cls  --config c.cfg --out cls1/ [--ckpt run1/stage3]
    picovlm finetune-vlm  --config c.cfg --out vlm1/ [--ckpt run1/stage3]
    picovlm analyze-flops --config c.cfg --out rep/  [--mode both]
    picovlm grad-map      --ckpt run1/stage3 --image i.png --caption "..." --out maps/
    picovlm attn-map      --ckpt run1/stage3 --image i.png --caption "..." --out maps/
    picovlm caption       --ckpt run1/stage3 --image i.png

Every run takes an exclusive lock on its output directory and writes a
run.txt (command, config digest, seed) plus a copy of the config, enough
to reproduce it exactly.  Exit codes: 0 success, 1 validation/runtime
failure with a diagnostic, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ConfigError, PicoVlmError
from .lm import ModeSpec, TokenSequence
from .serialize import save_named, write_manifest
from .tokenizer import Tokenizer


@contextmanager
def locked_output(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out} is in use (stale lock? remove {lock})") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_run_record(out, args, cfg):
    fields = {
        "version": f"picovlm-{__version__}",
        "command": args.command,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    }
    for key in ("ckpt", "image", "caption", "mode", "resume"):
        value = getattr(args, key, None)
        if value is not None:
            fields[key] = value
    write_manifest(out / "run.txt", fields)
    (out / "config.cfg").write_text(cfg.canonical_text(), encoding="utf-8")


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.fields["seed"] = str(args.seed)
    return cfg


def _load_checkpoint_model(path):
    from .training import load_model_from_checkpoint

    model, fields = load_model_from_checkpoint(path)
    vocab_path = Path(path) / "vocab.txt"
    tokenizer = Tokenizer.from_file(vocab_path) if vocab_path.exists() else None
    return model, tokenizer, fields


def cmd_gen_data(args):
    from .data import export_dataset

    cfg = _load_config(args)
    dataset = cfg.dataset()
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        export_dataset(dataset, out)
        n = len(getattr(dataset, "samples", dataset))
        print(f"wrote {n} samples to {out}")
    return 0


def cmd_pretrain(args):
    from .training import run_pretrain

    cfg = _load_config(args)
    dataset = cfg.dataset()
    model = cfg.model(vocab_size=dataset.tokenizer.vocab_size)
    schedules = cfg.pretrain_schedules()
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        checkpoints, losses = run_pretrain(
            model, dataset, schedules, out, cfg.seed, resume_from=args.resume)
        for ckpt in checkpoints:
            print(f"checkpoint: {ckpt}")
        for stage, loss in losses.items():
            print(f"stage {stage} train loss: {loss:.4f}")
    return 0


def cmd_finetune_cls(args):
    from .data import gen_classification
    from .training import finetune_classifier

    cfg = _load_config(args)
    num_classes = cfg.get("cls.num_classes", 2, int)
    enc_cfg = cfg.encoder_config()
    if args.ckpt:
        model, _, _ = _load_checkpoint_model(args.ckpt)
        encoder = model.encoder
    else:
        encoder = cfg.model().encoder
    samples = gen_classification(
        cfg.get("data.n", 64, int), cfg.get("data.seed", cfg.seed, int),
        enc_cfg.image_h, enc_cfg.image_w, enc_cfg.channels)
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        head, accuracy, steps = finetune_classifier(
            encoder, samples, num_classes, schedule=cfg.cls_schedule(),
            seed=cfg.seed, augment=cfg.get("cls.augment", True, bool))
        save_named(out / "classifier_head.pvm",
                   {name: p.data for name, p in head.named_params()})
        write_manifest(out / "classifier.txt", {
            "train_accuracy": f"{accuracy:.4f}",
            "steps_used": steps,
            "num_classes": num_classes,
            "head_params": head.param_count(),
        })
        print(f"train accuracy {accuracy:.4f} after {steps} steps")
    return 0


def cmd_finetune_vlm(args):
    from .training import finetune_vlm

    cfg = _load_config(args)
    if args.ckpt:
        model, tokenizer, _ = _load_checkpoint_model(args.ckpt)
        dataset = cfg.dataset()
        if tokenizer is not None and tokenizer.vocab_size == dataset.tokenizer.vocab_size:
            dataset.tokenizer = tokenizer
    else:
        dataset = cfg.dataset()
        model = cfg.model(vocab_size=dataset.tokenizer.vocab_size)
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        ckpt, losses = finetune_vlm(model, dataset, cfg.vlm_sub_schedules(),
                                    out_dir=out, seed=cfg.seed)
        print(f"checkpoint: {ckpt}")
        for sub, loss in losses.items():
            print(f"sub-stage {sub} train loss: {loss:.4f}")
    return 0


def cmd_analyze_flops(args):
    from .flops import flop_report

    cfg = _load_config(args)
    model = cfg.model()
    n_text = cfg.get("flops.n_text", 16, int)
    wanted = {"self-attn": ["concat"], "cross-attn": ["hierarchical"],
              "both": ["concat", "hierarchical"]}[args.mode]
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        for mode_name in wanted:
            report = flop_report(model, n_text, mode_name, seed=cfg.seed)
            tag = "self_attn" if mode_name == "concat" else "cross_attn"
            report.save(out / f"flops_{tag}.json")
            print(f"{tag}: measured {report.measured_total} MACs "
                  f"(llm-internal {report.llm_internal})")
    return 0


def _introspection_inputs(args, cfg):
    from .data import load_image

    model, tokenizer, _ = _load_checkpoint_model(args.ckpt)
    if tokenizer is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no vocab.txt")
    image = load_image(args.image, model.enc_cfg.image_h, model.enc_cfg.image_w,
                       model.enc_cfg.channels)
    return model, tokenizer, image


def cmd_grad_map(args):
    from .introspect import gradient_map

    cfg = _load_config(args)
    model, tokenizer, image = _introspection_inputs(args, cfg)
    seq = TokenSequence.for_caption(tokenizer, args.caption, model.lm_cfg.max_seq)
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        gmap = gradient_map(model, image, seq, out_dir=out)
        print(f"wrote {gmap.depth} layer maps to {out}"
              + (f" (zero-gradient layers: {gmap.zero_layers})" if gmap.zero_layers else ""))
    return 0


def cmd_attn_map(args):
    from .introspect import attention_maps

    cfg = _load_config(args)
    model, tokenizer, image = _introspection_inputs(args, cfg)
    seq = TokenSequence.for_caption(tokenizer, args.caption, model.lm_cfg.max_seq)
    if args.tokens:
        token_indices = [int(v) for v in args.tokens.split(",")]
    else:
        token_indices = list(range(min(5, len(seq.ids))))
    with locked_output(args.out) as out:
        _write_run_record(out, args, cfg)
        records, maps = attention_maps(model, image, seq, token_indices,
                                       tokenizer=tokenizer, out_dir=out)
        print(f"wrote {len(maps)} maps ({len(records)} head rows) to {out}")
    return 0


def cmd_caption(args):
    cfg = _load_config(args)
    model, tokenizer, _ = _load_checkpoint_model(args.ckpt)
    if tokenizer is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no vocab.txt")
    from .data import load_image

    image = load_image(args.image, model.enc_cfg.image_h, model.enc_cfg.image_w,
                       model.enc_cfg.channels)
    mode = ModeSpec(args.mode, selection=model.selection) \
        if args.mode == "hierarchical" else ModeSpec(args.mode)
    prompt = TokenSequence.for_ids([tokenizer.bos_id])
    decoded = model.generate_greedy(prompt, image, mode, max_new=args.max_new,
                                    stop_id=tokenizer.eos_id)
    print(tokenizer.decode(decoded.ids))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="picovlm",
        description="desk-scale hierarchical cross-attention vision-language training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the three-stage pre-training")
    common(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-cls", help="train a linear classifier head")
    common(p)
    p.add_argument("--ckpt", help="checkpoint providing the frozen encoder")
    p.set_defaults(func=cmd_finetune_cls)

    p = sub.add_parser("finetune-vlm", help="two-pass concat-mode fine-tune")
    common(p)
    p.add_argument("--ckpt", help="checkpoint providing the starting model")
    p.set_defaults(func=cmd_finetune_vlm)

    p = sub.add_parser("analyze-flops", help="closed-form vs instrumented MAC counts")
    common(p)
    p.add_argument("--mode", choices=["self-attn", "cross-attn", "both"], default="both")
    p.set_defaults(func=cmd_analyze_flops)

    p = sub.add_parser("grad-map", help="per-layer patch gradient maps")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.set_defaults(func=cmd_grad_map)

    p = sub.add_parser("attn-map", help="cross-attention maps for chosen tokens")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--tokens", help="comma-separated token indices (default: first 5)")
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("caption", help="greedy-decode a caption for an image")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=["hierarchical", "concat"], default="hierarchical")
    p.add_argument("--max-new", type=int, default=16, dest="max_new")
    p.set_defaults(func=cmd_caption)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except PicoVlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
