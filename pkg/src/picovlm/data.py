"""Synthetic captioned scenes, dataset files, and image augmentation.

The caption grammar is closed and fixed so the vocabulary never drifts:

    caption  := "a" COLOR SHAPE RELATION "a" COLOR SHAPE
    COLOR    := red | green | blue | yellow | white
    SHAPE    := square | circle | triangle
    RELATION := above | below | "left of" | "right of"

Scenes are rendered procedurally from the caption, so image and text agree
by construction and a fixed seed reproduces the dataset bit for bit.

On disk a dataset is a directory of 8-bit RGB PNGs plus `manifest.jsonl`,
one record per line: {"image": <filename>, "caption": <text>, "label": <int>?}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .lm import TokenSequence
from .tokenizer import Tokenizer

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.80, 0.18),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.86, 0.12),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("above", "below", "left of", "right of")

_BACKGROUND = 0.05
_RNG_DATA = 2


@dataclass
class CaptionSample:
    image: np.ndarray          # [H, W, C] floats in [0, 1]
    caption: str
    label: int = None
    sequence: TokenSequence = None

    def __post_init__(self):
        if not self.caption:
            raise DataError("caption must be non-empty")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixels outside [0, 1]: min {lo}, max {hi}")


class CaptionDataset:
    def __init__(self, samples, tokenizer=None, max_seq=77):
        if not samples:
            raise DataError("empty dataset")
        self.samples = list(samples)
        self.max_seq = max_seq
        if tokenizer is None:
            tokenizer = Tokenizer.from_corpus([s.caption for s in self.samples])
        self.tokenizer = tokenizer
        for s in self.samples:
            if s.sequence is None:
                s.sequence = TokenSequence.for_caption(tokenizer, s.caption, max_seq)

    def __len__(self):
        return len(self.samples)


def _draw_shape(img, shape, color, cy, cx, r):
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "triangle":
        # upward-pointing: width grows linearly from apex to base
        rel = (yy - (cy - r)) / max(2 * r, 1)
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= rel * r)
    else:
        raise DataError(f"unknown shape {shape!r}")
    img[mask] = color


def render_scene(caption_parts, image_h, image_w, channels=3):
    """Render "(c1, s1, relation, c2, s2)" onto a dark background."""
    c1, s1, rel, c2, s2 = caption_parts
    img = np.full((image_h, image_w, channels), _BACKGROUND, dtype=np.float64)
    r = max(2, min(image_h, image_w) // 8)
    pos = {
        "above": ((image_h // 4, image_w // 2), (3 * image_h // 4, image_w // 2)),
        "below": ((3 * image_h // 4, image_w // 2), (image_h // 4, image_w // 2)),
        "left of": ((image_h // 2, image_w // 4), (image_h // 2, 3 * image_w // 4)),
        "right of": ((image_h // 2, 3 * image_w // 4), (image_h // 2, image_w // 4)),
    }[rel]
    col1 = np.asarray(COLORS[c1][:channels])
    col2 = np.asarray(COLORS[c2][:channels])
    _draw_shape(img, s1, col1, pos[0][0], pos[0][1], r)
    _draw_shape(img, s2, col2, pos[1][0], pos[1][1], r)
    return img


def gen_synthetic(n, seed, image_h=32, image_w=32, channels=3, max_seq=77):
    """n distinct captioned scenes, fully determined by the seed."""
    if n < 1:
        raise DataError("need at least one sample")
    combos = [
        (c1, s1, rel, c2, s2)
        for c1 in COLORS for s1 in SHAPES for rel in RELATIONS
        for c2 in COLORS for s2 in SHAPES
        if (c1, s1) != (c2, s2)
    ]
    if n > len(combos):
        raise DataError(f"at most {len(combos)} distinct scenes available, asked for {n}")
    rng = np.random.default_rng([seed, _RNG_DATA])
    picks = rng.choice(len(combos), size=n, replace=False)
    samples = []
    for i in picks:
        parts = combos[int(i)]
        caption = f"a {parts[0]} {parts[1]} {parts[2]} a {parts[3]} {parts[4]}"
        samples.append(CaptionSample(
            image=render_scene(parts, image_h, image_w, channels), caption=caption))
    return CaptionDataset(samples, max_seq=max_seq)


def gen_classification(n, seed, image_h=32, image_w=32, channels=3):
    """Two linearly separable classes: a warm blob in the top half (label 0)
    versus a cool blob in the bottom half (label 1).

    The rule is invariant under horizontal flips, so the crop/flip
    augmentation used during classifier fine-tuning cannot invert a label,
    and the colour component keeps the classes separable even after
    mean-pooling patch features (position alone would cancel there).
    """
    if n < 1:
        raise DataError("need at least one sample")
    rng = np.random.default_rng([seed, _RNG_DATA, 1])
    warm = np.asarray((0.95, 0.35, 0.15)[:channels])
    cool = np.asarray((0.15, 0.35, 0.95)[:channels])
    samples = []
    for i in range(n):
        label = int(i % 2)
        img = np.full((image_h, image_w, channels), 0.1, dtype=np.float64)
        brightness = rng.uniform(0.7, 1.0)
        half = image_h // 2
        r = max(2, image_h // 6)
        cx = int(rng.integers(r, image_w - r))
        cy = int(rng.integers(r, half - r + 1)) if label == 0 \
            else int(rng.integers(half + r - 1, image_h - r))
        color = (warm if label == 0 else cool) * brightness
        _draw_shape(img, "square", color, cy, cx, r)
        samples.append(CaptionSample(image=img, caption=f"class {label}", label=label))
    order = rng.permutation(n)
    return [samples[int(k)] for k in order]


def pixel_probe_accuracy(samples, num_classes=2):
    """Least-squares linear probe on raw pixels; the bar the generator must clear."""
    x = np.stack([s.image.reshape(-1) for s in samples])
    x = np.concatenate([x, np.ones((len(samples), 1))], axis=1)
    y = np.zeros((len(samples), num_classes))
    for i, s in enumerate(samples):
        y[i, s.label] = 1.0
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = np.argmax(x @ w, axis=1)
    truth = np.array([s.label for s in samples])
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# Files


def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def export_dataset(dataset_or_samples, path):
    """Write PNGs + manifest.jsonl; the inverse of load_dataset up to 8-bit
    quantisation (at most 1/255 per channel)."""
    samples = getattr(dataset_or_samples, "samples", dataset_or_samples)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        fname = f"img_{i:05d}.png"
        arr = _to_uint8(s.image)
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        Image.fromarray(arr, "RGB").save(path / fname)
        record = {"image": fname, "caption": s.caption}
        if s.label is not None:
            record["label"] = int(s.label)
        lines.append(json.dumps(record))
    (path / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(path, image_h=None, image_w=None, channels=3, tokenizer=None,
                 max_seq=77, build_sequences=True):
    """Read a manifest.jsonl dataset; resizes bilinearly when dims differ."""
    path = Path(path)
    manifest = path / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest.jsonl under {path}")
    samples = []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {lineno}: malformed JSON ({exc})") from exc
        if "image" not in record or "caption" not in record:
            raise DataError(f"manifest line {lineno}: needs image and caption fields")
        img_path = path / record["image"]
        if not img_path.exists():
            raise DataError(f"manifest line {lineno}: missing image file {record['image']}")
        try:
            with Image.open(img_path) as im:
                im = im.convert("RGB" if channels == 3 else "L")
                if image_h is not None and (im.height, im.width) != (image_h, image_w):
                    im = im.resize((image_w, image_h), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except DataError:
            raise
        except Exception as exc:
            raise DataError(
                f"manifest line {lineno}: unreadable image {record['image']} ({exc})") from exc
        if channels == 1:
            arr = arr[:, :, None]
        samples.append(CaptionSample(
            image=arr, caption=record["caption"], label=record.get("label")))
    if not samples:
        raise DataError(f"empty dataset: {manifest} has no records")
    if not build_sequences:
        return samples
    return CaptionDataset(samples, tokenizer=tokenizer, max_seq=max_seq)


def load_image(path, image_h, image_w, channels=3):
    """Single raster file -> float [H, W, C] in [0, 1], bilinear resize."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if (im.height, im.width) != (image_h, image_w):
            im = im.resize((image_w, image_h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if channels == 1:
        arr = arr[:, :, None]
    return arr


# ---------------------------------------------------------------------------
# Augmentation (classifier fine-tuning only)


def _resize_float(img, out_h, out_w, resample):
    chans = [
        np.asarray(
            Image.fromarray(img[:, :, c].astype(np.float32), mode="F")
            .resize((out_w, out_h), resample),
            dtype=np.float64)
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=2)


def augment_image(image, rng, scale=(0.4, 1.0), ratio=(0.75, 1.33)):
    """Random resized crop (bicubic) then horizontal flip with p = 0.5.

    Deterministic given the generator's state; callers derive `rng` from
    (seed, epoch, sample) so every epoch resamples but reruns match.
    """
    h, w, _ = image.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = image[top:top + ch, left:left + cw, :]
            break
    else:
        crop = image
    out = _resize_float(crop, h, w, Image.BICUBIC)
    out = np.clip(out, 0.0, 1.0)  # bicubic can overshoot
    if rng.random() < 0.5:
        out = out[:, ::-1, :].copy()
    return out
