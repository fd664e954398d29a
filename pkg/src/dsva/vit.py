"""
Minimal pre-norm ViT whose forward pass can expose per-layer facets
(query, key, value, block output) and post-softmax attention maps.

Layers are indexed from 1. Facet ``t`` at layer ``l`` is the output token
sequence of block ``l``; ``q``/``k``/``v`` at layer ``l`` are the full-width
(pre head split) projections of ``LN(T^{l-1})`` where ``T^0`` is the
embedded input sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint

FACETS = ("q", "k", "v", "t")
VARIANTS = ("CL", "MIM", "SUP")
LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


class CapabilityError(RuntimeError):
    """The model lacks a capability the caller asked for (e.g. no classifier head)."""


@dataclass
class ViTConfig:
    image_side: int = 32
    patch: int = 4
    stride: int = 4
    depth: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    variant_tag: str = "CL"
    num_classes: int = 0
    # fixed input standardisation (x - mean) / std applied before patch embedding
    input_mean: float = 0.5
    input_std: float = 0.25

    def validate(self) -> "ViTConfig":
        errors = []
        if min(self.image_side, self.patch, self.stride, self.depth, self.dim, self.heads) <= 0:
            errors.append("image_side, patch, stride, depth, dim, heads must be positive")
        else:
            if self.stride > self.patch:
                errors.append("stride <= patch")
            if self.patch > self.image_side:
                errors.append("patch <= image_side")
            elif (self.image_side - self.patch) % self.stride:
                errors.append("(image_side - patch) divisible by stride")
            if self.dim % self.heads:
                errors.append("dim divisible by heads")
        if self.mlp_ratio <= 0:
            errors.append("mlp_ratio positive")
        if self.variant_tag not in VARIANTS:
            errors.append(f"variant_tag in {VARIANTS}")
        if self.num_classes < 0:
            errors.append("num_classes >= 0")
        if self.input_std <= 0:
            errors.append("input_std positive")
        if errors:
            raise ConfigError("invalid ViTConfig: " + "; ".join(errors))
        return self

    @property
    def grid(self) -> int:
        return (self.image_side - self.patch) // self.stride + 1

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


class Collected(NamedTuple):
    facets: dict  # layer -> {facet name: (B, tokens, D)}
    attention: dict  # layer -> (B, heads, tokens, tokens)
    logits: Optional[torch.Tensor]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.reshape(B, N, self.heads, D // self.heads).transpose(1, 2)

        attn = (split(q) @ split(k).transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), (q, k, v, attn)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        a, inner = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, inner


class ViT(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg.validate()
        base_grid = cfg.image_side // cfg.patch
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch, stride=cfg.stride)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        # stored on the non-overlapping grid, resampled when stride < patch
        self.pos_embed = nn.Parameter(torch.zeros(1, base_grid * base_grid + 1, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        self.head = nn.Linear(cfg.dim, cfg.num_classes) if cfg.num_classes else None

    def patch_pos_embed(self) -> torch.Tensor:
        pos = self.pos_embed[:, 1:]
        base = int(math.isqrt(pos.shape[1]))
        grid = self.cfg.grid
        if grid == base:
            return pos
        pos = pos.reshape(1, base, base, -1).permute(0, 3, 1, 2)
        pos = F.interpolate(pos, size=(grid, grid), mode="bilinear", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, grid * grid, -1)

    def embed_patches(self, x: torch.Tensor) -> torch.Tensor:
        """Patch tokens with positional embedding, (B, n, D), no [CLS]."""
        if x.shape[-2:] != (self.cfg.image_side, self.cfg.image_side):
            raise ValueError(
                f"input is {tuple(x.shape[-2:])}, model expects {self.cfg.image_side}x{self.cfg.image_side}"
            )
        x = (x - self.cfg.input_mean) / self.cfg.input_std
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        return tokens + self.patch_pos_embed()

    def cls_with_pos(self, batch: int) -> torch.Tensor:
        return (self.cls_token + self.pos_embed[:, :1]).expand(batch, -1, -1)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        patches = self.embed_patches(x)
        return torch.cat([self.cls_with_pos(x.shape[0]), patches], dim=1)

    def run_blocks(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            tokens, _ = blk(tokens)
        return tokens

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Final normalised [CLS] embedding (or logits when a head exists)."""
        cls = self.norm(self.run_blocks(self.embed(x)))[:, 0]
        return self.head(cls) if self.head is not None else cls

    def collect(self, x, layers, facets=FACETS, want_attention=False, want_logits=False) -> Collected:
        layers = sorted(set(int(l) for l in layers))
        facets = set(facets)
        bad = facets - set(FACETS)
        if bad:
            raise ValueError(f"unknown facets {sorted(bad)}; choose from {FACETS}")
        for l in layers:
            if not 1 <= l <= self.cfg.depth:
                raise IndexError(f"layer {l} out of range [1, {self.cfg.depth}]")
        if want_logits and self.head is None:
            raise CapabilityError("model has no classification head")
        last = self.cfg.depth if want_logits else (layers[-1] if layers else 0)
        wanted = set(layers)
        out_facets, out_attn = {}, {}
        tokens = self.embed(x)
        for idx in range(1, last + 1):
            tokens, (q, k, v, attn) = self.blocks[idx - 1](tokens)
            if idx in wanted:
                named = {"q": q, "k": k, "v": v, "t": tokens}
                out_facets[idx] = {f: named[f] for f in FACETS if f in facets}
                if want_attention:
                    out_attn[idx] = attn
        logits = self.head(self.norm(tokens)[:, 0]) if want_logits else None
        return Collected(out_facets, out_attn, logits)


def _pixels(x) -> torch.Tensor:
    return x.pixels if hasattr(x, "pixels") else x


def init_surrogate(cfg: ViTConfig, seed: int) -> ViT:
    """Build a ViT with truncated-normal weights (std 0.02) and zero biases.

    The global RNG state is left untouched; the same seed always gives
    bitwise-identical parameters.
    """
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed))
    model = ViT(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
    return model.eval()


def forward_collect(model: ViT, x, layers: Iterable[int], facets=FACETS, want_attention=False,
                    want_logits=False) -> Collected:
    return model.collect(_pixels(x), layers, facets, want_attention, want_logits)


def classify(model: nn.Module, x) -> torch.Tensor:
    if getattr(model, "head", None) is None:
        raise CapabilityError("model has no classification head")
    return model(_pixels(x))


def save_vit(model: ViT, path):
    return save_checkpoint(model, model.cfg.to_dict(), "vit", path)


def load_vit(path) -> ViT:
    cfg, tensors = read_checkpoint(path, "vit")
    model = ViT(ViTConfig.from_dict(cfg))
    load_into(model, tensors, source=str(path))
    return model.eval()
