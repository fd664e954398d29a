"""ResNet-style image-to-image perturbation generator and the L-inf projection."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint


@dataclass
class GeneratorConfig:
    base_width: int = 64
    n_res_blocks: int = 6
    downsamples: int = 2
    epsilon: float = 10 / 255

    def validate(self):
        if self.base_width <= 0 or self.n_res_blocks < 0 or self.downsamples < 0:
            raise ValueError("base_width > 0, n_res_blocks >= 0, downsamples >= 0 required")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        return self

    def to_dict(self):
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """stem -> strided downsampling -> residual blocks -> transposed-conv decoder -> tanh."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg.validate()
        w = cfg.base_width
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, w, 7, bias=False),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        ]
        ch = w
        for _ in range(cfg.downsamples):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, bias=False),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResBlock(ch) for _ in range(cfg.n_res_blocks)]
        for _ in range(cfg.downsamples):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        factor = 2**self.cfg.downsamples
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        return (torch.tanh(self.net(x)) + 1.0) / 2.0


def build_generator(cfg: GeneratorConfig, seed: int) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return Generator(cfg)


def generate(g: Generator, x) -> torch.Tensor:
    return g(x.pixels if hasattr(x, "pixels") else x)


def project(raw: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """clamp(x + clamp(raw - x, -eps, eps), 0, 1)."""
    if raw.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(raw.shape)} vs {tuple(x.shape)}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    delta = torch.clamp(raw - x, -epsilon, epsilon)
    return torch.clamp(x + delta, 0.0, 1.0)


def save_generator(g: Generator, path):
    return save_checkpoint(g, g.cfg.to_dict(), "generator", path)


def load_generator(path) -> Generator:
    cfg, tensors = read_checkpoint(path, "generator")
    g = Generator(GeneratorConfig(**cfg))
    load_into(g, tensors, source=str(path))
    return g.eval()
