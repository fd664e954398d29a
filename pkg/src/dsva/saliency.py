"""Attention saliency from the [CLS] row of a layer's attention maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


@dataclass
class SaliencyMap:
    """Per-patch weights (B, n). ``gamma`` is applied by the loss, not stored in ``weights``."""

    weights: torch.Tensor
    layer: int
    gamma: float = 100.0


def cls_attention(attention: dict, layer: int) -> torch.Tensor:
    """Attention from [CLS] to every patch token, (B, heads, n)."""
    if layer not in attention:
        raise KeyError(f"attention for layer {layer} was not collected")
    A = attention[layer]
    if A.shape[-1] < 2:
        raise ValueError("need at least one patch token besides [CLS]")
    return A[:, :, 0, 1:]


def saliency_map(cls_attn: torch.Tensor, gamma: float = 100.0, layer: int = -1) -> SaliencyMap:
    if cls_attn.dim() != 3:
        raise ValueError(f"expected (B, heads, n), got {tuple(cls_attn.shape)}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return SaliencyMap(weights=cls_attn.mean(dim=1), layer=layer, gamma=float(gamma))


def saliency_from_attention(attention: dict, layer: int, gamma: float = 100.0) -> SaliencyMap:
    return saliency_map(cls_attention(attention, layer), gamma, layer)


def heatmap_array(S: SaliencyMap, grid_side: int, out_side: int) -> np.ndarray:
    """(B, out_side, out_side) uint8 heatmaps; constant maps render all-zero."""
    w = S.weights.detach().cpu().double().numpy()
    n = w.shape[1]
    if grid_side * grid_side != n or math.isqrt(n) ** 2 != n:
        raise ValueError(f"{n} weights do not form a {grid_side}x{grid_side} grid")
    lo = w.min(axis=1, keepdims=True)
    span = w.max(axis=1, keepdims=True) - lo
    norm = np.where(span > 0, (w - lo) / np.where(span > 0, span, 1.0), 0.0)
    grid = norm.reshape(-1, grid_side, grid_side)
    idx = np.arange(out_side) * grid_side // out_side
    big = grid[:, idx][:, :, idx]
    return np.rint(big * 255.0).astype(np.uint8)


def saliency_to_heatmap(S: SaliencyMap, grid_side: int, out_side: int, ids=None, out_dir=None):
    """Render min-max normalised heatmaps; write ``<id>_l<layer>.png`` when ``out_dir`` is given."""
    maps = heatmap_array(S, grid_side, out_side)
    if out_dir is None:
        return maps
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = ids or [f"{i:05d}" for i in range(len(maps))]
    paths = []
    for m, sid in zip(maps, ids):
        p = out_dir / f"{Path(sid).stem}_l{S.layer}.png"
        Image.fromarray(m, mode="L").save(p)
        paths.append(p)
    return paths
