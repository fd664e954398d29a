"""Feature-discrimination losses: cosine, saliency-weighted cosine, joint and CE ablation."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .saliency import SaliencyMap
from .vit import FACETS


@dataclass
class LossConfig:
    lam: float = 0.5
    gamma: float = 100.0
    use_attention: bool = True
    facet_I: str = "k"
    facet_II: str = "q"
    layer_I: int = 4
    layer_II: int = 4
    include_cls: bool = False
    per_token: bool = False

    def validate(self, depth_I: int | None = None, depth_II: int | None = None) -> "LossConfig":
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        for f in (self.facet_I, self.facet_II):
            if f not in FACETS:
                raise ValueError(f"facet {f!r} not in {FACETS}")
        for layer, depth in ((self.layer_I, depth_I), (self.layer_II, depth_II)):
            if layer < 1 or (depth is not None and layer > depth):
                raise ValueError(f"layer {layer} outside model depth {depth}")
        return self

    def to_dict(self):
        return asdict(self)


def select_tokens(feats: torch.Tensor, include_cls: bool) -> torch.Tensor:
    return feats if include_cls else feats[:, 1:]


def _cos_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dot = (a * b).sum(-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    # NaN denominators stay NaN so the trainer can detect them
    ok = (denom > 0) | denom.isnan()
    if not bool(ok.all()):
        warnings.warn("zero-norm feature vector; cosine similarity defined as 0", RuntimeWarning)
    return torch.where(ok, dot / denom.clamp_min(torch.finfo(denom.dtype).tiny), torch.zeros_like(dot))


def per_sample_cosine(F_x: torch.Tensor, F_adv: torch.Tensor, per_token: bool = False) -> torch.Tensor:
    """Cosine similarity per sample, (B,)."""
    if F_x.shape != F_adv.shape:
        raise ValueError(f"shape mismatch {tuple(F_x.shape)} vs {tuple(F_adv.shape)}")
    B = F_x.shape[0]
    if per_token and F_x.dim() == 3:
        return _cos_rows(F_x, F_adv).mean(dim=1)
    return _cos_rows(F_x.reshape(B, -1), F_adv.reshape(B, -1))


def cosine_discrimination(F_x: torch.Tensor, F_adv: torch.Tensor, per_token: bool = False) -> torch.Tensor:
    """Batch-mean cosine similarity in [-1, 1]; minimising it pushes features apart."""
    return per_sample_cosine(F_x, F_adv, per_token).mean()


def weight_tokens(feats: torch.Tensor, S: SaliencyMap) -> torch.Tensor:
    if feats.dim() != 3 or feats.shape[:2] != S.weights.shape:
        raise ValueError(
            f"features {tuple(feats.shape)} do not align with saliency {tuple(S.weights.shape)}"
        )
    return feats * (S.gamma * S.weights).unsqueeze(-1)


def weighted_cosine(F_x: torch.Tensor, F_adv: torch.Tensor, S: SaliencyMap, per_token: bool = False) -> torch.Tensor:
    """Cosine loss with every token scaled by ``gamma * S_i`` on both sides."""
    return cosine_discrimination(weight_tokens(F_x, S), weight_tokens(F_adv, S), per_token)


def joint_loss(loss_I: torch.Tensor, loss_II, lam: float) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if loss_II is None:
        return loss_I
    return lam * loss_I + (1.0 - lam) * loss_II


def supervised_ce_loss(logits_adv: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Negative cross-entropy; minimising it drives samples away from their labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = logits_adv.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise ValueError(f"labels must lie in [0, {C - 1}]")
    return -F.cross_entropy(logits_adv, labels)
