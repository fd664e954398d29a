"""
Black-box evaluation: fooling rate, transfer reports across target adapters,
the MI-FGSM baseline and PCA of facet features.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_io import ImageBatch
from .vit import CapabilityError

log = logging.getLogger(__name__)

FOOL_MODES = ("clean", "label")


@dataclass
class TargetAdapter:
    """A black-box classifier: ``predict`` maps an ImageBatch (or NCHW tensor) to class ids.

    ``model`` is optional and only used by white-box baselines such as MI-FGSM.
    """

    name: str
    predict: Callable
    model: Optional[nn.Module] = None

    @classmethod
    def from_module(cls, name: str, module: nn.Module, batch_size: int = 256) -> "TargetAdapter":
        module.eval()

        @torch.no_grad()
        def predict(x):
            px = x.pixels if isinstance(x, ImageBatch) else x
            out = [module(px[i : i + batch_size]).argmax(dim=-1) for i in range(0, len(px), batch_size)]
            return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)

        return cls(name=name, predict=predict, model=module)


def _check_aligned(x: ImageBatch, x_adv: ImageBatch):
    if list(x.ids) != list(x_adv.ids):
        raise ValueError("clean and adversarial batches are not aligned by id")


def linf_distance(x: ImageBatch, x_adv: ImageBatch) -> float:
    if len(x) == 0:
        return 0.0
    return float((x_adv.pixels - x.pixels).abs().max())


def fooling_rate(target: TargetAdapter, x: ImageBatch, x_adv: ImageBatch, epsilon: Optional[float] = None,
                 mode: str = "clean") -> float:
    """Fraction of samples whose prediction on ``x_adv`` differs from the reference.

    ``mode="clean"`` compares with the target's own clean prediction;
    ``mode="label"`` compares with the ground-truth labels of ``x``.
    """
    _check_aligned(x, x_adv)
    if mode not in FOOL_MODES:
        raise ValueError(f"mode must be one of {FOOL_MODES}")
    if epsilon is not None:
        d = linf_distance(x, x_adv)
        if d > epsilon + 1e-6:
            raise ValueError(f"adversarial batch violates the budget: {d:.6f} > {epsilon:.6f}")
    if len(x) == 0:
        return 0.0
    adv_pred = torch.as_tensor(target.predict(x_adv))
    if mode == "clean":
        ref = torch.as_tensor(target.predict(x))
    else:
        if x.labels is None:
            raise ValueError("label mode needs ground-truth labels")
        ref = x.labels
    return float((adv_pred != ref).float().mean())


@dataclass
class TransferReport:
    attack: dict
    targets: dict = field(default_factory=dict)  # name -> {"fooling_rate", "n"} or None
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        targets = {
            k: None if v is None else {"fooling_rate": round(float(v["fooling_rate"]), 4), "n": int(v["n"])}
            for k, v in self.targets.items()
        }
        out = {"attack": self.attack, "targets": targets}
        if self.errors:
            out["errors"] = dict(self.errors)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransferReport":
        d = json.loads(text)
        return cls(attack=d["attack"], targets=d["targets"], errors=d.get("errors", {}))


def transfer_matrix(targets: Sequence[TargetAdapter], x: ImageBatch, x_adv: ImageBatch, meta: dict,
                    epsilon: Optional[float] = None, mode: str = "clean") -> TransferReport:
    if not targets:
        raise ValueError("at least one target is required")
    _check_aligned(x, x_adv)
    report = TransferReport(attack=dict(meta))
    for t in targets:
        try:
            rate = fooling_rate(t, x, x_adv, epsilon=epsilon, mode=mode)
            report.targets[t.name] = {"fooling_rate": rate, "n": len(x)}
        except Exception as exc:  # one broken adapter must not sink the report
            log.warning("target %s failed: %s", t.name, exc)
            report.targets[t.name] = None
            report.errors[t.name] = f"{type(exc).__name__}: {exc}"
    return report


def uniform_noise(x: ImageBatch, epsilon: float, seed: int = 0) -> ImageBatch:
    """Epsilon-matched baseline: x + U(-eps, eps), clipped to [0, 1]."""
    gen = torch.Generator().manual_seed(seed)
    noise = (torch.rand(x.pixels.shape, generator=gen) * 2 - 1) * epsilon
    return x.with_pixels((x.pixels + noise).clamp(0, 1))


def mifgsm(model: nn.Module, x, labels, epsilon: float, steps: int = 10, mu: float = 1.0,
           step_size: Optional[float] = None) -> torch.Tensor:
    """Momentum iterative FGSM (untargeted).

    g <- mu * g + grad / ||grad||_1 (per sample); x <- Proj(x + alpha * sign(g)).
    """
    if model is None or getattr(model, "head", True) is None:
        raise CapabilityError("MI-FGSM needs a model with a classification head")
    px = x.pixels if isinstance(x, ImageBatch) else x
    labels = torch.as_tensor(labels, dtype=torch.long)
    alpha = epsilon / steps if step_size is None else step_size
    model.eval()
    x0 = px.detach()
    adv = x0.clone()
    g = torch.zeros_like(x0)
    for _ in range(steps):
        adv.requires_grad_(True)
        loss = F.cross_entropy(model(adv), labels)
        grad, = torch.autograd.grad(loss, adv)
        l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
        g = mu * g + grad / l1
        adv = adv.detach() + alpha * g.sign()
        adv = torch.min(torch.max(adv, x0 - epsilon), x0 + epsilon).clamp(0, 1)
    return adv.detach()


class PCAResult(NamedTuple):
    components: np.ndarray  # (D, k), orthonormal columns
    scores: np.ndarray  # (tokens, k), centred projections
    explained_variance: np.ndarray  # (k,), non-increasing


def pca_facets(features, k: int = 3, rank_tol: float = 1e-10) -> PCAResult:
    """Top-k principal directions of mean-centred features via the covariance eigendecomposition."""
    X = np.asarray(features.detach().cpu() if isinstance(features, torch.Tensor) else features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be (tokens, D)")
    if X.shape[0] < k:
        raise ValueError(f"need at least {k} tokens")
    Xc = X - X.mean(axis=0, keepdims=True)
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    keep = int(np.sum(evals[:k] > rank_tol * max(scale, 1e-300))) if scale > 0 else 0
    if keep < k:
        warnings.warn(f"features have rank {keep} < {k}; returning {keep} components", RuntimeWarning)
    comps = evecs[:, :keep]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(keep)])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return PCAResult(comps, Xc @ comps, np.clip(evals[:keep], 0.0, None))


def pca_rgb(scores: np.ndarray, grid_side: int, out_side: Optional[int] = None) -> np.ndarray:
    """Min-max scale each component to [0, 255] and lay the tokens out on the patch grid."""
    s = np.zeros((scores.shape[0], 3))
    s[:, : scores.shape[1]] = scores[:, :3]
    lo, hi = s.min(axis=0), s.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    s = np.where(hi > lo, (s - lo) / span, 0.0)
    img = np.rint(s.reshape(grid_side, grid_side, 3) * 255).astype(np.uint8)
    if out_side:
        idx = np.arange(out_side) * grid_side // out_side
        img = img[idx][:, idx]
    return img
