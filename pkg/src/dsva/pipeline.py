"""
End-to-end toy run: micro-pretrain the CL and MIM surrogates, train a small
CNN target, train one generator per attack variant and evaluate transfer.

Every stage reseeds from the config, so two runs with the same config produce
identical checkpoints and byte-identical reports.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .checkpoint import state_checksum
from .data_io import ImageBatch
from .evaluator import TargetAdapter, fooling_rate, transfer_matrix, uniform_noise
from .generator import GeneratorConfig, build_generator, save_generator
from .targets import CNNConfig, accuracy, save_cnn, train_target
from .toydata import make_toy_dataset
from .trainer import (
    AttackConfig,
    PretrainConfig,
    SurrogateRef,
    apply_generator,
    facet_cosine,
    pretrain_surrogate,
    train_generator,
)
from .vit import ViTConfig, save_vit

VARIANTS = ("CL", "MIM", "joint")


def _default_attack() -> AttackConfig:
    return AttackConfig(
        epsilon=16 / 255,
        lam=0.5,
        surrogate_I=SurrogateRef(facet="k", layer=4),
        surrogate_II=SurrogateRef(facet="k", layer=4),
        steps=200,
        batch_size=16,
        generator=GeneratorConfig(base_width=32, n_res_blocks=4),
    )


@dataclass
class ToyPipelineConfig:
    seed: int = 0
    n_train: int = 512
    n_test: int = 128
    vit: ViTConfig = field(default_factory=ViTConfig)
    cl: PretrainConfig = field(default_factory=lambda: PretrainConfig.for_kind("CL"))
    mim: PretrainConfig = field(default_factory=lambda: PretrainConfig.for_kind("MIM"))
    target: CNNConfig = field(default_factory=CNNConfig)
    target_epochs: int = 12
    attack: AttackConfig = field(default_factory=_default_attack)
    variants: tuple = VARIANTS


@dataclass
class VariantResult:
    name: str
    generator_checksum: str
    log: list
    cos_before: float  # held-out facet cosine of the untrained generator's outputs
    cos_after: float
    fooling_rate: float
    report_json: str
    seconds: float


@dataclass
class ToyPipelineResult:
    surrogates: dict  # kind -> {"checksum", "seconds", "history"}
    target_accuracy: float
    noise_fooling_rate: float
    variants: dict = field(default_factory=dict)  # name -> VariantResult
    seconds: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "target_accuracy": self.target_accuracy,
            "noise_fooling_rate": self.noise_fooling_rate,
            "surrogates": {k: {"checksum": v["checksum"], "seconds": round(v["seconds"], 1)}
                           for k, v in self.surrogates.items()},
            "variants": {
                k: {"cos_before": v.cos_before, "cos_after": v.cos_after, "fooling_rate": v.fooling_rate,
                    "generator_checksum": v.generator_checksum, "seconds": round(v.seconds, 1)}
                for k, v in self.variants.items()
            },
        }


def variant_config(base: AttackConfig, name: str) -> AttackConfig:
    """Single-surrogate variants keep only the matching reference."""
    cfg = copy.deepcopy(base)
    if name == "CL":
        cfg.surrogate_II = None
    elif name == "MIM":
        cfg.surrogate_I, cfg.surrogate_II = cfg.surrogate_II or cfg.surrogate_I, None
    elif name != "joint":
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return cfg.validate()


def run_toy_pipeline(cfg: ToyPipelineConfig = ToyPipelineConfig(), out_dir=None,
                     data: Optional[tuple] = None) -> ToyPipelineResult:
    out = Path(out_dir) if out_dir is not None else None
    train, test = data if data is not None else make_toy_dataset(cfg.n_train, cfg.n_test, seed=cfg.seed)

    surrogates, models = {}, {}
    for kind, pcfg in (("CL", cfg.cl), ("MIM", cfg.mim)):
        t0 = time.perf_counter()
        pcfg = copy.copy(pcfg)
        pcfg.seed = cfg.seed
        res = pretrain_surrogate(kind, train, pcfg, cfg.vit, eval_data=test if kind == "MIM" else None)
        models[kind] = res.model
        surrogates[kind] = {"checksum": state_checksum(res.model), "seconds": time.perf_counter() - t0,
                            "history": res.history}
        if out is not None:
            save_vit(res.model, out / f"surrogate_{kind}")

    cnn = train_target(train, cfg.target, epochs=cfg.target_epochs, seed=cfg.seed + 1234)
    if out is not None:
        save_cnn(cnn, out / "target_cnn")
    target = TargetAdapter.from_module("cnn", cnn)
    eps = cfg.attack.epsilon
    noise = uniform_noise(test, eps, seed=cfg.seed)
    result = ToyPipelineResult(
        surrogates=surrogates,
        target_accuracy=accuracy(cnn, test),
        noise_fooling_rate=fooling_rate(target, test, noise, epsilon=eps),
    )

    for name in cfg.variants:
        t0 = time.perf_counter()
        vcfg = variant_config(cfg.attack, name)
        vcfg.seed = cfg.seed
        pair = {"CL": [models["CL"]], "MIM": [models["MIM"]], "joint": [models["CL"], models["MIM"]]}[name]
        gcfg = copy.copy(vcfg.generator)
        gcfg.epsilon = eps
        untrained = build_generator(gcfg, vcfg.seed)
        cos_before = facet_cosine(pair, vcfg.refs(), test, apply_generator(untrained, test, eps))
        trained = train_generator(train, vcfg, pair)
        adv = apply_generator(trained.generator, test, eps)
        cos_after = facet_cosine(pair, vcfg.refs(), test, adv)
        report = transfer_matrix([target], test, adv, {"variant": name, "epsilon_255": round(eps * 255, 4),
                                                        "steps": vcfg.steps, "seed": vcfg.seed}, epsilon=eps)
        rj = report.to_json()
        if out is not None:
            save_generator(trained.generator, out / f"generator_{name}")
            trained.write_log(out / f"train_log_{name}.jsonl")
            (out / f"report_{name}.json").write_text(rj)
        result.variants[name] = VariantResult(
            name=name,
            generator_checksum=state_checksum(trained.generator),
            log=trained.log,
            cos_before=sum(cos_before) / len(cos_before),
            cos_after=sum(cos_after) / len(cos_after),
            fooling_rate=report.targets["cnn"]["fooling_rate"],
            report_json=rj,
            seconds=time.perf_counter() - t0,
        )
    if out is not None:
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
    return result
