"""
Image ingestion and the binary tensor container used for every artifact the
package writes (checkpoints, adversarial deltas).

Container layout (all little-endian)::

    b"DSVA" | version:u8 | dtype:u8 | rank:u8 | shape: rank x u32 | payload

dtype code 0 is float32; the payload is row-major.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

MAGIC = b"DSVA"
VERSION = 1
DTYPE_F32 = 0
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class TensorFormatError(ValueError):
    """Raised when a tensor container does not follow the documented layout."""


@dataclass
class ImageBatch:
    """A batch of images in [0, 1], NCHW float32, with optional labels."""

    pixels: torch.Tensor
    ids: list[str]
    labels: Optional[torch.Tensor] = None
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-D (N, C, H, W), got {tuple(self.pixels.shape)}")
        if len(self.ids) != self.pixels.shape[0]:
            raise ValueError("one id per sample required")
        if self.labels is not None and len(self.labels) != len(self.ids):
            raise ValueError("one label per sample required")

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "ImageBatch":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageBatch(
            pixels=self.pixels[index],
            ids=[self.ids[i] for i in index.tolist()],
            labels=None if self.labels is None else self.labels[index],
        )

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels=pixels, ids=list(self.ids), labels=self.labels)

    def manifest(self) -> dict:
        return {"ids": list(self.ids), "skipped": list(self.skipped)}


def env_threads(default: int = 1) -> int:
    """Worker cap from DSVA_THREADS (falls back to ``default``)."""
    try:
        return max(1, int(os.environ.get("DSVA_THREADS", default)))
    except ValueError:
        return default


def resize(pixels: torch.Tensor, side: int) -> torch.Tensor:
    """Plain bilinear resize, no antialiasing, no crop."""
    if pixels.shape[-2:] == (side, side):
        return pixels
    out = F.interpolate(pixels, size=(side, side), mode="bilinear", align_corners=False, antialias=False)
    return out.clamp_(0.0, 1.0)


def _decode(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def uint8_to_unit(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 -> CHW float32 in [0, 1]; 0 and 255 map exactly to 0.0 and 1.0."""
    return torch.from_numpy(arr.astype(np.float32) / np.float32(255.0)).permute(2, 0, 1).contiguous()


def load_image_dir(path, side: int, labels: Optional[dict] = None) -> ImageBatch:
    """Load every PNG/JPEG under ``path`` (non-recursive), sorted by filename.

    Undecodable files are skipped with a warning and listed in
    ``batch.skipped``. ``labels`` optionally maps filename -> class id.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    if side <= 0:
        raise ValueError("side must be positive")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def work(p):
        try:
            return _decode(p)
        except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
            return exc

    # map() preserves input order, so output order never depends on scheduling
    with ThreadPoolExecutor(max_workers=env_threads()) as pool:
        decoded = list(pool.map(work, files))

    tensors, ids, skipped = [], [], []
    for p, arr in zip(files, decoded):
        if isinstance(arr, Exception):
            log.warning("skipping undecodable image %s: %s", p.name, arr)
            skipped.append(p.name)
            continue
        tensors.append(resize(uint8_to_unit(arr)[None], side)[0])
        ids.append(p.name)
    if tensors:
        pixels = torch.stack(tensors)
    else:
        pixels = torch.zeros(0, 3, side, side)
    lab = None
    if labels is not None:
        lab = torch.tensor([int(labels[i]) for i in ids], dtype=torch.long)
    return ImageBatch(pixels=pixels, ids=ids, labels=lab, skipped=skipped)


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """NCHW [0, 1] float -> NHWC uint8, round-to-nearest."""
    arr = pixels.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
    return np.rint(arr * 255.0).astype(np.uint8)


def save_png_batch(pixels: torch.Tensor, ids: Sequence[str], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for arr, name in zip(to_uint8(pixels), ids):
        p = out_dir / (Path(name).stem + ".png")
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def write_manifest(batch: ImageBatch, path) -> None:
    Path(path).write_text(json.dumps(batch.manifest(), indent=2))


def _as_float32_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype != np.float32:
        raise TypeError(f"only float32 tensors can be written, got {arr.dtype}")
    return arr


def encode_tensor(t) -> bytes:
    arr = _as_float32_array(t)
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7:
        raise TensorFormatError(f"{source}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, dtype, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{source}: unsupported dtype code {dtype}")
    offset = 7 + 4 * rank
    if len(buf) < offset:
        raise TensorFormatError(f"{source}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    actual = len(buf) - offset
    if actual != expected:
        raise TensorFormatError(
            f"{source}: payload size mismatch, expected {expected} bytes, got {actual}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def write_tensor(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))
