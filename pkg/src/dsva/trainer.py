"""
Surrogate micro-pretraining (CL / MIM / SUP) and the generator training loop.

The generator is trained so that the configured facet of each frozen
surrogate, computed on the projected output, loses cosine similarity with the
same facet computed on the benign input. Saliency weights always come from
the benign input.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import state_checksum
from .data_io import ImageBatch
from .generator import Generator, GeneratorConfig, build_generator, project
from .losses import (
    joint_loss,
    per_sample_cosine,
    select_tokens,
    supervised_ce_loss,
    weight_tokens,
)
from .saliency import saliency_from_attention
from .vit import FACETS, Block, ViT, ViTConfig, classify, init_surrogate, load_vit

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _strict(cls, d: dict, where: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class SurrogateRef:
    checkpoint: str = ""
    facet: str = "k"
    layer: int = 4


@dataclass
class OptimizerConfig:
    name: str = "Adam"
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)


@dataclass
class AttackConfig:
    epsilon: float = 10 / 255
    lam: float = 0.5
    gamma: float = 100.0
    use_attention: bool = True
    surrogate_I: SurrogateRef = field(default_factory=SurrogateRef)
    surrogate_II: Optional[SurrogateRef] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 1
    steps: Optional[int] = None  # fixed step budget; overrides epochs when set
    batch_size: int = 32
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train_projection: bool = True
    include_cls: bool = False
    per_token: bool = False
    loss: str = "feature"  # "feature" or "ce" (supervised ablation)

    def __post_init__(self):
        # the attack budget is the single source of truth for the generator's epsilon
        self.generator.epsilon = self.epsilon

    @property
    def joint(self) -> bool:
        return self.surrogate_II is not None

    def refs(self) -> list[SurrogateRef]:
        return [self.surrogate_I] + ([self.surrogate_II] if self.surrogate_II else [])

    def validate(self) -> "AttackConfig":
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1] (already divided by 255)")
        self.generator.epsilon = self.epsilon
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.optimizer.name != "Adam":
            raise ValueError("only the Adam optimizer is supported")
        if self.loss not in ("feature", "ce"):
            raise ValueError("loss must be 'feature' or 'ce'")
        for r in self.refs():
            if r.facet not in FACETS:
                raise ValueError(f"facet {r.facet!r} not in {FACETS}")
        if self.batch_size <= 0 or (self.steps is None and self.epochs <= 0):
            raise ValueError("batch_size and epochs/steps must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "surrogate_I" in d:
            d["surrogate_I"] = _strict(SurrogateRef, d["surrogate_I"], "surrogate_I")
        if d.get("surrogate_II") is not None:
            d["surrogate_II"] = _strict(SurrogateRef, d["surrogate_II"], "surrogate_II")
        if "optimizer" in d:
            opt = _strict(OptimizerConfig, d["optimizer"], "optimizer")
            opt.betas = tuple(opt.betas)
            d["optimizer"] = opt
        if "generator" in d:
            d["generator"] = _strict(GeneratorConfig, d["generator"], "generator")
        return _strict(cls, d, "attack config").validate()


@dataclass
class TrainResult:
    generator: Generator
    log: list  # per-step dicts

    def write_log(self, path):
        write_jsonl(self.log, path)


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def iterate_batches(n: int, batch_size: int, seed: int, epochs: int = 1, steps: Optional[int] = None):
    """Shuffled index batches; reshuffles each pass. ``steps`` caps the total count."""
    gen = torch.Generator().manual_seed(seed)
    done = 0
    epoch = 0
    while True:
        if steps is None and epoch >= epochs:
            return
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            if steps is not None and done >= steps:
                return
            yield perm[i : i + batch_size]
            done += 1
        epoch += 1


def _facet_features(model: ViT, x, ref: SurrogateRef, want_attention: bool):
    out = model.collect(x, [ref.layer], [ref.facet], want_attention=want_attention)
    return out.facets[ref.layer][ref.facet], out.attention


def surrogate_loss(model: ViT, ref: SurrogateRef, x: torch.Tensor, adv: torch.Tensor, cfg: AttackConfig,
                   labels=None):
    """Return ``(loss, per-sample unweighted cosine)`` for one surrogate."""
    if cfg.loss == "ce":
        loss = supervised_ce_loss(classify(model, adv), labels)
        with torch.no_grad():
            fx, _ = _facet_features(model, x, ref, False)
            fa, _ = _facet_features(model, adv, ref, False)
            cos = per_sample_cosine(select_tokens(fx, cfg.include_cls), select_tokens(fa, cfg.include_cls))
        return loss, cos
    with torch.no_grad():
        fx, attn = _facet_features(model, x, ref, cfg.use_attention)
    fa, _ = _facet_features(model, adv, ref, False)
    # the saliency map has one entry per patch, so [CLS] is dropped whenever weighting is on
    include_cls = cfg.include_cls and not cfg.use_attention
    fx, fa = select_tokens(fx, include_cls), select_tokens(fa, include_cls)
    if cfg.use_attention:
        S = saliency_from_attention(attn, ref.layer, cfg.gamma)
        loss = per_sample_cosine(weight_tokens(fx, S), weight_tokens(fa, S), cfg.per_token).mean()
    else:
        loss = per_sample_cosine(fx, fa, cfg.per_token).mean()
    with torch.no_grad():
        cos = per_sample_cosine(fx, fa.detach())
    return loss, cos


def _resolve_surrogates(cfg: AttackConfig, surrogates):
    if surrogates is not None:
        models = list(surrogates)
        if len(models) != len(cfg.refs()):
            raise ValueError(f"config names {len(cfg.refs())} surrogate(s), got {len(models)} models")
    else:
        models = [load_vit(r.checkpoint) for r in cfg.refs()]
    for m, r in zip(models, cfg.refs()):
        if not 1 <= r.layer <= m.cfg.depth:
            raise ValueError(f"layer {r.layer} outside surrogate depth {m.cfg.depth}")
    return [freeze(m) for m in models]


def train_generator(data: ImageBatch, cfg: AttackConfig, surrogates: Optional[Sequence[ViT]] = None,
                    dump_dir=None) -> TrainResult:
    """Train a generator against one (or two, joint mode) frozen surrogates."""
    cfg.validate()
    models = _resolve_surrogates(cfg, surrogates)
    before = [state_checksum(m) for m in models]
    gcfg = copy.copy(cfg.generator)
    gcfg.epsilon = cfg.epsilon
    g = build_generator(gcfg, cfg.seed)
    g.train()
    opt = torch.optim.Adam(g.parameters(), lr=cfg.optimizer.lr, betas=tuple(cfg.optimizer.betas))
    if cfg.loss == "ce" and data.labels is None:
        raise ValueError("the CE ablation needs labelled data")

    records = []
    batches = iterate_batches(len(data), cfg.batch_size, cfg.seed, cfg.epochs, cfg.steps)
    for step, idx in enumerate(batches, start=1):
        x = data.pixels[idx]
        labels = data.labels[idx] if data.labels is not None else None
        raw = g(x)
        adv = project(raw, x, cfg.epsilon) if cfg.train_projection else raw
        if cfg.train_projection:
            bound = float((adv - x).detach().abs().max())
            if bound > cfg.epsilon + 1e-6:
                raise TrainingError(f"step {step}: projection violated the budget ({bound})")
        losses, cosines = [], []
        for model, ref in zip(models, cfg.refs()):
            loss_i, cos_i = surrogate_loss(model, ref, x, adv, cfg, labels)
            losses.append(loss_i)
            cosines.append(cos_i.mean())
        loss = joint_loss(losses[0], losses[1] if len(losses) > 1 else None, cfg.lam)
        if not torch.isfinite(loss):
            ids = [data.ids[i] for i in idx.tolist()]
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                (Path(dump_dir) / f"nan_step{step}.json").write_text(json.dumps({"step": step, "ids": ids}))
            raise TrainingError(f"non-finite loss at step {step}; batch ids: {ids}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append({
            "step": step,
            "loss": float(loss.detach()),
            "loss_I": float(losses[0].detach()),
            "loss_II": float(losses[1].detach()) if len(losses) > 1 else None,
            "mean_cos_benign_adv": float(torch.stack(cosines).mean()),
        })
        if step % 25 == 0:
            log.info("step %d loss %.4f cos %.4f", step, records[-1]["loss"], records[-1]["mean_cos_benign_adv"])

    after = [state_checksum(m) for m in models]
    if before != after:
        raise TrainingError("surrogate parameters changed during generator training")
    return TrainResult(generator=g.eval(), log=records)


@torch.no_grad()
def apply_generator(g: Generator, x: ImageBatch, epsilon: float, batch_size: int = 64) -> ImageBatch:
    """Projected adversarial batch, aligned with ``x``."""
    g.eval()
    out = [project(g(x.pixels[i : i + batch_size]), x.pixels[i : i + batch_size], epsilon)
           for i in range(0, len(x), batch_size)]
    return x.with_pixels(torch.cat(out) if out else x.pixels.clone())


@torch.no_grad()
def facet_cosine(models: Sequence[ViT], refs: Sequence[SurrogateRef], x: ImageBatch, x_adv: ImageBatch,
                 include_cls: bool = False) -> list[float]:
    """Mean unweighted cosine between benign and adversarial configured facets, per surrogate."""
    res = []
    for m, r in zip(models, refs):
        fx, _ = _facet_features(m, x.pixels, r, False)
        fa, _ = _facet_features(m, x_adv.pixels, r, False)
        res.append(float(per_sample_cosine(select_tokens(fx, include_cls), select_tokens(fa, include_cls)).mean()))
    return res


# ---------------------------------------------------------------------------
# surrogate micro-pretraining


# measured on the 512-image toy set; a step budget keeps each run well under 5 CPU minutes
KIND_DEFAULTS = {
    "CL": {"steps": 300, "lr": 1e-3, "momentum": 0.99},
    "MIM": {"steps": 480},
    "SUP": {"lr": 1e-4, "weight_decay": 0.0},
}


@dataclass
class PretrainConfig:
    epochs: int = 10
    steps: Optional[int] = None
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0
    momentum: float = 0.996  # CL teacher EMA
    temperature: float = 0.2
    proj_dim: int = 64
    crop_scale: tuple = (0.35, 1.0)
    mask_ratio: float = 0.75
    decoder_dim: int = 64
    decoder_depth: int = 1
    num_classes: int = 2
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def to_dict(self):
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "PretrainConfig":
        """Toy-scale defaults tuned per objective; keyword overrides win."""
        return cls(**{**KIND_DEFAULTS[kind.upper()], **overrides})

    @classmethod
    def from_dict(cls, d):
        cfg = _strict(cls, d, "pretrain config")
        cfg.crop_scale = tuple(cfg.crop_scale)
        return cfg


@dataclass
class PretrainResult:
    model: ViT
    history: list  # per-step {"step", "loss"} plus per-epoch eval records


def _mlp(i, h, o):
    return nn.Sequential(nn.Linear(i, h), nn.GELU(), nn.Linear(h, o))


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student."""
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(momentum).add_(ps.detach(), alpha=1.0 - momentum)


def contrastive_alignment(student: torch.Tensor, teacher: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cosine alignment of student/teacher projections with in-batch negatives (InfoNCE)."""
    logits = F.normalize(student, dim=-1) @ F.normalize(teacher, dim=-1).T / temperature
    return F.cross_entropy(logits, torch.arange(len(logits))) * (2 * temperature)


def random_views(x: torch.Tensor, gen: torch.Generator, scale=(0.35, 1.0)) -> torch.Tensor:
    """Per-sample random resized crop, horizontal flip and brightness jitter."""
    B = x.shape[0]
    area = torch.empty(B).uniform_(scale[0], scale[1], generator=gen)
    s = area.sqrt()
    tx = (torch.rand(B, generator=gen) * 2 - 1) * (1 - s)
    ty = (torch.rand(B, generator=gen) * 2 - 1) * (1 - s)
    flip = torch.where(torch.rand(B, generator=gen) < 0.5, -1.0, 1.0)
    theta = torch.zeros(B, 2, 3)
    theta[:, 0, 0] = s * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = s
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    bright = torch.empty(B, 1, 1, 1).uniform_(0.8, 1.2, generator=gen)
    return (out * bright).clamp(0, 1)


class _DivergenceGuard:
    def __init__(self, factor, patience):
        self.factor, self.patience = factor, patience
        self.initial = None
        self.run = 0

    def __call__(self, step, loss):
        if not math.isfinite(loss):
            raise TrainingError(f"pretraining produced a non-finite loss at step {step}")
        if self.initial is None:
            self.initial = abs(loss)
            return
        self.run = self.run + 1 if abs(loss) > self.factor * self.initial else 0
        if self.run >= self.patience:
            raise TrainingError(
                f"pretraining diverged: loss above {self.factor}x initial for {self.run} steps"
            )


class MAEDecoder(nn.Module):
    def __init__(self, enc_dim, dim, depth, heads, num_patches, patch_pixels):
        super().__init__()
        self.embed = nn.Linear(enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.zeros(1, num_patches + 1, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, 4.0) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pred = nn.Linear(dim, patch_pixels)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, latent, restore):
        B = latent.shape[0]
        z = self.embed(latent)
        n = restore.shape[1]
        masks = self.mask_token.expand(B, n + 1 - z.shape[1], -1)
        seq = torch.cat([z[:, 1:], masks], dim=1)
        seq = torch.gather(seq, 1, restore.unsqueeze(-1).expand(-1, -1, z.shape[-1]))
        seq = torch.cat([z[:, :1], seq], dim=1) + self.pos
        for blk in self.blocks:
            seq, _ = blk(seq)
        return self.pred(self.norm(seq))[:, 1:]


def patch_targets(x: torch.Tensor, cfg: ViTConfig) -> torch.Tensor:
    """Pixels under each token's window, (B, n, 3 * patch * patch)."""
    return F.unfold(x, cfg.patch, stride=cfg.stride).transpose(1, 2)


def mae_forward(encoder: ViT, decoder: MAEDecoder, x, mask_ratio, gen):
    """Masked reconstruction loss: per-patch MSE averaged over masked patches."""
    tokens = encoder.embed_patches(x)
    B, n, D = tokens.shape
    keep = max(1, int(round(n * (1 - mask_ratio))))
    noise = torch.rand(B, n, generator=gen)
    shuffle = noise.argsort(dim=1)
    restore = shuffle.argsort(dim=1)
    visible = torch.gather(tokens, 1, shuffle[:, :keep].unsqueeze(-1).expand(-1, -1, D))
    seq = torch.cat([encoder.cls_with_pos(B), visible], dim=1)
    latent = encoder.norm(encoder.run_blocks(seq))
    pred = decoder(latent, restore)
    mask = torch.ones(B, n)
    mask[:, :keep] = 0
    mask = torch.gather(mask, 1, restore)
    per_patch = ((pred - patch_targets(x, encoder.cfg)) ** 2).mean(dim=-1)
    return (per_patch * mask).sum() / mask.sum()


@torch.no_grad()
def mae_eval(encoder, decoder, data: ImageBatch, mask_ratio, seed=12345, batch_size=128) -> float:
    encoder.eval()
    decoder.eval()
    gen = torch.Generator().manual_seed(seed)
    tot, cnt = 0.0, 0
    for i in range(0, len(data), batch_size):
        x = data.pixels[i : i + batch_size]
        tot += float(mae_forward(encoder, decoder, x, mask_ratio, gen)) * len(x)
        cnt += len(x)
    encoder.train()
    decoder.train()
    return tot / max(cnt, 1)


def pretrain_surrogate(kind: str, data: ImageBatch, cfg: PretrainConfig, vit_cfg: ViTConfig,
                       eval_data: Optional[ImageBatch] = None) -> PretrainResult:
    """Desk-scale stand-ins for contrastive, masked-image-modelling and supervised pretraining."""
    kind = kind.upper()
    if kind not in ("CL", "MIM", "SUP"):
        raise ValueError(f"unknown pretraining kind {kind!r}")
    vit_cfg = copy.copy(vit_cfg)
    vit_cfg.variant_tag = kind
    vit_cfg.num_classes = cfg.num_classes if kind == "SUP" else 0
    vit_cfg.validate()
    if kind == "SUP" and data.labels is None:
        raise ValueError("SUP pretraining needs labels")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return {"CL": _pretrain_cl, "MIM": _pretrain_mim, "SUP": _pretrain_sup}[kind](data, cfg, vit_cfg, eval_data)


def _optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _steps_per_epoch(n, cfg):
    return math.ceil(n / cfg.batch_size)


def _pretrain_cl(data, cfg, vit_cfg, eval_data):
    student = init_surrogate(vit_cfg, cfg.seed).train()
    s_head = _mlp(vit_cfg.dim, 256, cfg.proj_dim)
    predictor = _mlp(cfg.proj_dim, 256, cfg.proj_dim)
    teacher = freeze(copy.deepcopy(student))
    t_head = freeze(copy.deepcopy(s_head))
    params = list(student.parameters()) + list(s_head.parameters()) + list(predictor.parameters())
    opt = _optimizer(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    history = []
    for step, idx in enumerate(iterate_batches(len(data), cfg.batch_size, cfg.seed, cfg.epochs, cfg.steps), 1):
        x = data.pixels[idx]
        v1, v2 = random_views(x, gen, cfg.crop_scale), random_views(x, gen, cfg.crop_scale)
        p1 = predictor(s_head(student(v1)))
        p2 = predictor(s_head(student(v2)))
        with torch.no_grad():
            z1, z2 = t_head(teacher(v1)), t_head(teacher(v2))
        loss = contrastive_alignment(p1, z2, cfg.temperature) + contrastive_alignment(p2, z1, cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(teacher, student, cfg.momentum)
        ema_update(t_head, s_head, cfg.momentum)
        guard(step, float(loss.detach()))
        history.append({"step": step, "loss": float(loss.detach())})
    # the EMA teacher is the surrogate, as in the DINO family
    return PretrainResult(model=freeze(teacher), history=history)


def _pretrain_mim(data, cfg, vit_cfg, eval_data):
    encoder = init_surrogate(vit_cfg, cfg.seed).train()
    patch_pixels = 3 * vit_cfg.patch * vit_cfg.patch
    decoder = MAEDecoder(vit_cfg.dim, cfg.decoder_dim, cfg.decoder_depth, max(1, cfg.decoder_dim // 32),
                         vit_cfg.num_patches, patch_pixels)
    opt = _optimizer(list(encoder.parameters()) + list(decoder.parameters()), cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    per_epoch = _steps_per_epoch(len(data), cfg)
    history = []
    if eval_data is not None:
        history.append({"epoch": 0, "heldout_mse": mae_eval(encoder, decoder, eval_data, cfg.mask_ratio)})
    for step, idx in enumerate(iterate_batches(len(data), cfg.batch_size, cfg.seed, cfg.epochs, cfg.steps), 1):
        loss = mae_forward(encoder, decoder, data.pixels[idx], cfg.mask_ratio, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        guard(step, float(loss.detach()))
        history.append({"step": step, "loss": float(loss.detach())})
        if eval_data is not None and step % per_epoch == 0:
            history.append({"epoch": step // per_epoch,
                            "heldout_mse": mae_eval(encoder, decoder, eval_data, cfg.mask_ratio)})
    return PretrainResult(model=freeze(encoder), history=history)


def _pretrain_sup(data, cfg, vit_cfg, eval_data):
    model = init_surrogate(vit_cfg, cfg.seed).train()
    opt = _optimizer(model.parameters(), cfg)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    per_epoch = _steps_per_epoch(len(data), cfg)
    history = []
    for step, idx in enumerate(iterate_batches(len(data), cfg.batch_size, cfg.seed, cfg.epochs, cfg.steps), 1):
        loss = F.cross_entropy(model(data.pixels[idx]), data.labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        guard(step, float(loss.detach()))
        history.append({"step": step, "loss": float(loss.detach())})
        if eval_data is not None and eval_data.labels is not None and step % per_epoch == 0:
            with torch.no_grad():
                model.eval()
                acc = float((model(eval_data.pixels).argmax(-1) == eval_data.labels).float().mean())
                model.train()
            history.append({"epoch": step // per_epoch, "accuracy": acc})
    return PretrainResult(model=freeze(model), history=history)


# ---------------------------------------------------------------------------
# parameter sweeps

SWEEP_AXES = ("facet", "layer", "lambda")


def _sweep_cfg(base: AttackConfig, axis: str, value) -> AttackConfig:
    cfg = copy.deepcopy(base)
    if axis == "facet":
        for r in cfg.refs():
            r.facet = value
    elif axis == "layer":
        for r in cfg.refs():
            r.layer = int(value)
    elif axis == "lambda":
        cfg.lam = float(value)
    else:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
    return cfg.validate()


def sweep(axis: str, values, base_cfg: AttackConfig, data: ImageBatch, eval_data: Optional[ImageBatch] = None,
          targets=(), surrogates=None) -> dict:
    """One train+eval run per value; failures are recorded and the sweep continues."""
    from .evaluator import transfer_matrix

    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
    models = _resolve_surrogates(base_cfg, surrogates)
    rows = {}
    for value in values:
        key = str(value)
        try:
            cfg = _sweep_cfg(base_cfg, axis, value)
            res = train_generator(data, cfg, models)
            row = {
                "final_loss": res.log[-1]["loss"] if res.log else None,
                "loss_trace": [r["loss"] for r in res.log],
            }
            if eval_data is not None:
                adv = apply_generator(res.generator, eval_data, cfg.epsilon)
                row["heldout_cos"] = facet_cosine(models, cfg.refs(), eval_data, adv, cfg.include_cls)
                if targets:
                    row["transfer"] = transfer_matrix(targets, eval_data, adv, {"axis": axis, "value": key},
                                                      epsilon=cfg.epsilon).to_dict()["targets"]
            rows[key] = row
        except Exception as exc:
            log.warning("sweep %s=%s failed: %s", axis, key, exc)
            rows[key] = {"error": f"{type(exc).__name__}: {exc}"}
    return {"axis": axis, "values": [str(v) for v in values], "base": base_cfg.to_dict(), "runs": rows}
