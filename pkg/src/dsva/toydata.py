"""
Procedural two-class toy set: flat-filled polygons (class 0) versus patches
of high-frequency texture (class 1). Fully determined by the seed.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data_io import ImageBatch, save_png_batch


def _color(rng, avoid=None, min_dist=0.35):
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if avoid is None or np.abs(c - avoid).max() >= min_dist:
            return c


def _polygons(rng, side):
    bg = _color(rng)
    img = Image.new("RGB", (side, side), tuple(int(v * 255) for v in bg))
    draw = ImageDraw.Draw(img)
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2, 0.8, size=2) * side
        r = rng.uniform(0.15, 0.35) * side
        k = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        rad = r * rng.uniform(0.6, 1.0, size=k)
        pts = [(float(cx + a * np.cos(t)), float(cy + a * np.sin(t))) for a, t in zip(rad, ang)]
        fill = _color(rng, bg)
        draw.polygon(pts, fill=tuple(int(v * 255) for v in fill))
    return np.asarray(img, dtype=np.float32) / 255.0


def _texture(rng, h, w, contrast=(0.06, 0.5)):
    a = _color(rng)
    c = rng.uniform(*contrast)
    # second colour offset by the contrast in every channel, staying inside [0, 1]
    b = np.where(a + c <= 1.0, a + c, a - c)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    kind = rng.integers(0, 3)
    if kind == 0:
        period = rng.uniform(2.0, 4.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        m = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    elif kind == 1:
        cell = int(rng.integers(1, 3))
        m = ((xx // cell + yy // cell) % 2).astype(np.float32)
    else:
        m = (rng.uniform(size=(h, w)) > 0.5).astype(np.float32)
    return m[..., None] * a + (1 - m[..., None]) * b


def _textures(rng, side):
    img = np.ones((side, side, 3), np.float32) * _color(rng)
    for _ in range(rng.integers(2, 4)):
        h, w = rng.integers(side // 3, side * 2 // 3 + 1, size=2)
        y, x = rng.integers(0, side - h + 1), rng.integers(0, side - w + 1)
        img[y : y + h, x : x + w] = _texture(rng, h, w)
    return img


def make_split(n: int, side: int, rng, prefix: str) -> ImageBatch:
    imgs, labels = [], []
    for i in range(n):
        label = i % 2
        img = _polygons(rng, side) if label == 0 else _textures(rng, side)
        # quantise so the set survives an 8-bit PNG round trip bit-exactly
        img = np.rint(np.clip(img, 0, 1) * 255.0).astype(np.float32) / np.float32(255.0)
        imgs.append(img)
        labels.append(label)
    pixels = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
    ids = [f"{prefix}_{i:04d}.png" for i in range(n)]
    return ImageBatch(pixels=pixels, ids=ids, labels=torch.tensor(labels, dtype=torch.long))


def make_toy_dataset(n_train: int = 512, n_test: int = 128, side: int = 32, seed: int = 0):
    """Return ``(train, test)`` ImageBatches with balanced labels."""
    rng = np.random.default_rng(seed)
    train = make_split(n_train, side, rng, "train")
    test = make_split(n_test, side, rng, "test")
    return train, test


def write_toy_dataset(out_dir, **kwargs):
    """Write PNGs plus ``labels.json`` for both splits under ``out_dir/{train,test}``."""
    import json
    from pathlib import Path

    out = Path(out_dir)
    for split, batch in zip(("train", "test"), make_toy_dataset(**kwargs)):
        save_png_batch(batch.pixels, batch.ids, out / split)
        labels = {i: int(l) for i, l in zip(batch.ids, batch.labels.tolist())}
        (out / split / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))
    return out
