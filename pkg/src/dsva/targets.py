"""Small convolutional black-box target and checkpoint-backed adapters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data_io import ImageBatch
from .evaluator import TargetAdapter


@dataclass
class CNNConfig:
    num_classes: int = 2
    width: int = 16

    def to_dict(self):
        return asdict(self)


class SmallCNN(nn.Module):
    def __init__(self, cfg: CNNConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(4 * w, cfg.num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def train_target(data: ImageBatch, cfg: CNNConfig = CNNConfig(), epochs: int = 6, batch_size: int = 32,
                 lr: float = 1e-3, seed: int = 1234) -> SmallCNN:
    """Plain supervised training; deterministic for a fixed seed on one device."""
    if data.labels is None:
        raise ValueError("target training needs labels")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SmallCNN(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(data), generator=gen)
        for i in range(0, len(data), batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(model(data.pixels[idx]), data.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


@torch.no_grad()
def accuracy(model: nn.Module, data: ImageBatch) -> float:
    model.eval()
    return float((model(data.pixels).argmax(-1) == data.labels).float().mean())


def save_cnn(model: SmallCNN, path):
    return save_checkpoint(model, model.cfg.to_dict(), "cnn", path)


def load_cnn(path) -> SmallCNN:
    cfg, tensors = read_checkpoint(path, "cnn")
    model = SmallCNN(CNNConfig(**cfg))
    load_into(model, tensors, source=str(path))
    return model.eval()


def load_targets(manifest_path) -> list[TargetAdapter]:
    """Targets manifest: ``[{"name": ..., "kind": "cnn" | "vit", "checkpoint": path}, ...]``.

    Relative checkpoint paths resolve against the manifest's directory. Entries
    that fail to load become adapters whose ``predict`` raises, so the transfer
    report records them as failures.
    """
    from .vit import load_vit

    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    loaders = {"cnn": load_cnn, "vit": load_vit}
    adapters = []
    for e in entries:
        ckpt = Path(e["checkpoint"])
        if not ckpt.is_absolute():
            ckpt = manifest_path.parent / ckpt
        try:
            model = loaders[e["kind"]](ckpt)
            adapters.append(TargetAdapter.from_module(e["name"], model))
        except Exception as exc:
            err = f"{type(exc).__name__}: {exc}"

            def broken(_x, err=err):
                raise RuntimeError(err)

            adapters.append(TargetAdapter(e["name"], broken))
    return adapters
