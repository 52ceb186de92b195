"""Gradient maps and cross-attention maps, with PNG/CSV export.

Gradient maps answer "how strongly does the loss pull on each patch at each
encoder depth": one [H/P x W/P] grid of per-patch gradient L2 norms per
layer.  Attention maps show, per injected LM depth and chosen text token,
where the head-averaged cross-attention weight lands on the patch grid.

Renders are 8-bit grayscale PNGs, nearest-neighbour upscaled x8, each map
normalised to [0, 1] on its own; the CSVs keep raw values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import RequestError
from .lm import ModeSpec
from .tensor import Tape, Tensor


@dataclass
class GradientMap:
    grids: list                      # grids[l-1]: [H/P x W/P] for layer l
    zero_layers: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.grids)


@dataclass
class AttentionRecord:
    llm_layer: int
    head: int
    token_index: int
    token_text: str
    weights: np.ndarray


def _patch_grid(per_token, grid_shape, has_class_token):
    values = per_token[1:] if has_class_token else per_token
    return values.reshape(grid_shape)


def render_grid_png(grid, path, upscale=8):
    """Normalised grayscale render; an all-zero grid renders black."""
    peak = float(grid.max())
    norm = grid / peak if peak > 0 else np.zeros_like(grid)
    img = Image.fromarray(np.round(norm * 255).astype(np.uint8), mode="L")
    img = img.resize((grid.shape[1] * upscale, grid.shape[0] * upscale), Image.NEAREST)
    img.save(path)


def gradient_map(model, image, seq, stop_grad_after=None, out_dir=None):
    """One forward/backward of the caption loss; per-layer per-patch grad norms.

    The image enters as a gradient-carrying tensor, so every encoder layer
    output collects a gradient regardless of which parameter groups are
    currently frozen.  A layer whose output receives no gradient at all
    (e.g. below a stop-gradient with no tap above it) yields an exactly
    zero grid and is listed in `zero_layers`.
    """
    mode = ModeSpec("hierarchical", selection=model.selection)
    image_t = Tensor(np.asarray(image), requires_grad=True, dtype=model.dtype)
    with Tape() as tape:
        loss, feats = model.loss(seq, image_t, mode, keep_all=True,
                                 stop_grad_after=stop_grad_after,
                                 return_features=True)
        tape.backward(loss)

    grid_shape = model.enc_cfg.grid
    has_cls = model.enc_cfg.use_class_token
    grids, zero_layers = [], []
    for l in range(1, model.encoder.depth + 1):
        tap = feats.layers[l]
        if tap.grad is None:
            grids.append(np.zeros(grid_shape))
            zero_layers.append(l)
            continue
        norms = np.sqrt((tap.grad.astype(np.float64) ** 2).sum(axis=-1))
        grid = _patch_grid(norms, grid_shape, has_cls)
        grids.append(grid)
        if not grid.any():
            zero_layers.append(l)
    gmap = GradientMap(grids=grids, zero_layers=zero_layers)
    if out_dir is not None:
        export_gradient_map(gmap, out_dir)
    return gmap


def export_gradient_map(gmap, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for l, grid in enumerate(gmap.grids, start=1):
        render_grid_png(grid, out_dir / f"grad_map_layer{l:02d}.png")
    with open(out_dir / "grad_map.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "row", "col", "grad_norm"])
        for l, grid in enumerate(gmap.grids, start=1):
            for r in range(grid.shape[0]):
                for c in range(grid.shape[1]):
                    writer.writerow([l, r, c, repr(float(grid[r, c]))])
    if gmap.zero_layers:
        (out_dir / "grad_map_report.txt").write_text(
            "zero-gradient layers: " + ",".join(map(str, gmap.zero_layers)) + "\n",
            encoding="utf-8")
    return out_dir


def read_gradient_map_csv(path):
    grids = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            key = int(row["layer"])
            grids.setdefault(key, []).append(
                (int(row["row"]), int(row["col"]), float(row["grad_norm"])))
    out = []
    for l in sorted(grids):
        cells = grids[l]
        nr = max(r for r, _, _ in cells) + 1
        nc = max(c for _, c, _ in cells) + 1
        grid = np.zeros((nr, nc))
        for r, c, v in cells:
            grid[r, c] = v
        out.append(grid)
    return out


def attention_maps(model, image, seq, token_indices, tokenizer=None, out_dir=None):
    """Cross-attention weights for the requested text tokens.

    Returns (records, maps): one AttentionRecord per (injection, head,
    token) and one head-averaged patch grid per (injection, token).
    """
    for t in token_indices:
        if not 0 <= t < len(seq.ids):
            raise RequestError(f"token index {t} outside sequence of {len(seq.ids)}")
    mode = ModeSpec("hierarchical", selection=model.selection)
    sinks = [[] for _ in model.selection.pairs]
    model.forward(seq, image, mode, attn_sinks=sinks)

    grid_shape = model.enc_cfg.grid
    has_cls = model.enc_cfg.use_class_token
    records, maps = [], {}
    for rank, (_, llm_layer) in enumerate(model.selection.pairs):
        att = sinks[rank][0]                       # [heads, N_t, N_kv]
        for t in token_indices:
            text = tokenizer.tokens[seq.ids[t]] if tokenizer else str(seq.ids[t])
            for h in range(att.shape[0]):
                records.append(AttentionRecord(
                    llm_layer=llm_layer, head=h, token_index=t,
                    token_text=text, weights=att[h, t].copy()))
            maps[(llm_layer, t)] = _patch_grid(att[:, t].mean(axis=0), grid_shape, has_cls)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (llm_layer, t), grid in maps.items():
            render_grid_png(grid, out_dir / f"attn_L{llm_layer:02d}_tok{t:02d}.png")
        export_attention_csv(records, out_dir / "attention.csv")
    return records, maps


def export_attention_csv(records, path):
    """Rows of llm_layer,head,token_index,token_text,w0..w{n-1}."""
    n_kv = len(records[0].weights)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["llm_layer", "head", "token_index", "token_text"]
                        + [f"w{i}" for i in range(n_kv)])
        for rec in records:
            writer.writerow([rec.llm_layer, rec.head, rec.token_index, rec.token_text]
                            + [repr(float(w)) for w in rec.weights])
    return path


def read_attention_csv(path):
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        n_kv = len(header) - 4
        for row in reader:
            records.append(AttentionRecord(
                llm_layer=int(row[0]), head=int(row[1]), token_index=int(row[2]),
                token_text=row[3],
                weights=np.array([float(v) for v in row[4:4 + n_kv]])))
    return records
