"""Directory checkpoints: ``manifest.json`` plus one tensor container per parameter."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_io import TensorFormatError, read_tensor, write_tensor

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def state_checksum(module: nn.Module) -> str:
    """sha256 over all parameters and buffers in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(module: nn.Module, cfg: dict, kind: str, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, t in module.state_dict().items():
        write_tensor(t.detach().cpu().float().contiguous(), path / f"{name}.dten")
        names.append(name)
    manifest = {"version": CHECKPOINT_VERSION, "kind": kind, "cfg": cfg, "tensors": names}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_checkpoint(path, kind: str) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(cfg, tensors)``; raises CheckpointError on any mismatch."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"{path}: manifest.json not found")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')!r}")
    tensors = {}
    for name in manifest["tensors"]:
        f = path / f"{name}.dten"
        if not f.is_file():
            raise CheckpointError(f"{path}: missing tensor file for {name!r}")
        try:
            tensors[name] = torch.from_numpy(np.array(read_tensor(f)))
        except TensorFormatError as exc:
            raise CheckpointError(f"{path}: tensor {name!r} unreadable: {exc}") from exc
    return manifest["cfg"], tensors


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], source="checkpoint") -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{source}: tensor mismatch, missing={missing} unexpected={extra}")
    for name, ref in expected.items():
        if tuple(ref.shape) != tuple(tensors[name].shape):
            raise CheckpointError(
                f"{source}: tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"expected {tuple(ref.shape)}"
            )
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
