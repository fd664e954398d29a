"""
Command-line entry point.

Every subcommand writes into a fresh timestamped run directory under ``--out``
and copies the fully resolved configuration there as ``config.json``. Failures
exit with status 1 and one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import torch
from PIL import Image

from .data_io import ImageBatch, env_threads, load_image_dir, save_png_batch, write_manifest, write_tensor
from .generator import load_generator, project
from .trainer import AttackConfig, PretrainConfig, _strict
from .vit import FACETS, ViTConfig

log = logging.getLogger("dsva")


@dataclass
class DataConfig:
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    labels: Optional[str] = None  # JSON mapping filename -> class id
    side: int = 32


@dataclass
class RunConfig:
    """Everything a run needs. In JSON, ``attack.epsilon`` is on the 0-255 scale."""

    attack: AttackConfig = field(default_factory=AttackConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"attack", "vit", "pretrain", "data", "out"}
        if unknown:
            raise ValueError(f"unknown key(s) in run config: {sorted(unknown)}")
        attack = dict(d.get("attack", {}))
        if "epsilon" in attack:
            attack["epsilon"] = epsilon_from_255(attack["epsilon"])
        return cls(
            attack=AttackConfig.from_dict(attack),
            vit=ViTConfig.from_dict(d.get("vit", {})),
            pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
            data=_strict(DataConfig, d.get("data", {}), "data"),
            out=d.get("out", "runs"),
        )

    def to_dict(self) -> dict:
        attack = self.attack.to_dict()
        attack["epsilon"] = round(self.attack.epsilon * 255, 6)
        return {
            "attack": attack,
            "vit": self.vit.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "data": vars(self.data).copy(),
            "out": self.out,
        }


def epsilon_from_255(v) -> float:
    v = float(v)
    if not 0 < v <= 255:
        raise ValueError(f"epsilon must be on the 0-255 scale, got {v}")
    return v / 255.0


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    a = cfg.attack
    if getattr(args, "seed", None) is not None:
        a.seed = args.seed
        cfg.pretrain.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "eps", None) is not None:
        a.epsilon = epsilon_from_255(args.eps)
        a.generator.epsilon = a.epsilon
    if getattr(args, "lam", None) is not None:
        a.lam = args.lam
    if getattr(args, "gamma", None) is not None:
        a.gamma = args.gamma
    if getattr(args, "layer", None) is not None and args.command in ("train", "sweep"):
        for r in a.refs():
            r.layer = args.layer[0]
    if getattr(args, "facet", None) is not None and args.command in ("train", "sweep"):
        for r in a.refs():
            r.facet = args.facet
    if getattr(args, "no_attention", False):
        a.use_attention = False
    a.validate()
    return cfg


def make_run_dir(out: str, command: str, cfg: RunConfig) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = Path(out) / f"{stamp}_{command}"
    run.mkdir(parents=True, exist_ok=False)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return run


def _load_split(cfg: RunConfig, which: str, need_labels: bool = False) -> ImageBatch:
    path = getattr(cfg.data, f"{which}_dir")
    if path is None:
        raise ValueError(f"data.{which}_dir is not set")
    labels = None
    lab_path = Path(cfg.data.labels) if cfg.data.labels else Path(path) / "labels.json"
    if lab_path.is_file():
        labels = json.loads(lab_path.read_text())
    elif need_labels:
        raise ValueError(f"labels file not found: {lab_path}")
    return load_image_dir(path, cfg.data.side, labels)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args, cfg: RunConfig, run: Path) -> dict:
    from .trainer import pretrain_surrogate, write_jsonl
    from .vit import save_vit

    data = _load_split(cfg, "train", need_labels=args.kind == "SUP")
    eval_data = _load_split(cfg, "test", need_labels=args.kind == "SUP") if cfg.data.test_dir else None
    vit_cfg = ViTConfig(**{**cfg.vit.to_dict(), "variant_tag": args.kind})
    res = pretrain_surrogate(args.kind, data, cfg.pretrain, vit_cfg, eval_data=eval_data)
    ckpt = save_vit(res.model, run / f"surrogate_{args.kind}")
    write_jsonl(res.history, run / "history.jsonl")
    return {"checkpoint": str(ckpt)}


def cmd_train(args, cfg: RunConfig, run: Path) -> dict:
    from .checkpoint import state_checksum
    from .generator import save_generator
    from .trainer import train_generator

    data = _load_split(cfg, "train")
    res = train_generator(data, cfg.attack, dump_dir=run)
    ckpt = save_generator(res.generator, run / "generator")
    res.write_log(run / "train_log.jsonl")
    return {"checkpoint": str(ckpt), "checksum": state_checksum(res.generator)}


def cmd_attack(args, cfg: RunConfig, run: Path) -> dict:
    g = load_generator(args.generator)
    eps = epsilon_from_255(args.eps) if args.eps is not None else g.cfg.epsilon
    side = args.side or cfg.data.side
    x = load_image_dir(args.input, side)
    with torch.no_grad():
        adv = torch.cat([project(g(x.pixels[i : i + 64]), x.pixels[i : i + 64], eps)
                         for i in range(0, len(x), 64)]) if len(x) else x.pixels.clone()
    save_png_batch(adv, x.ids, run / "adv")
    delta_dir = run / "delta"
    delta_dir.mkdir()
    for d, name in zip(adv - x.pixels, x.ids):
        write_tensor(d, delta_dir / f"{Path(name).stem}.dten")
    write_manifest(x, run / "inputs.json")
    return {"adv_dir": str(run / "adv"), "n": len(x), "epsilon": eps}


def cmd_eval(args, cfg: RunConfig, run: Path) -> dict:
    from .evaluator import transfer_matrix
    from .targets import load_targets

    side = args.side or cfg.data.side
    labels = None
    if args.mode == "label":
        lab_path = Path(cfg.data.labels) if cfg.data.labels else Path(args.clean) / "labels.json"
        labels = json.loads(lab_path.read_text())
    clean = load_image_dir(args.clean, side, labels)
    adv = load_image_dir(args.adv, side)
    # PNG names may differ in suffix only; align by stem
    if [Path(i).stem for i in clean.ids] != [Path(i).stem for i in adv.ids]:
        raise ValueError("clean and adversarial directories hold different image sets")
    adv = ImageBatch(pixels=adv.pixels, ids=list(clean.ids))
    eps = epsilon_from_255(args.eps) + 1 / 255 if args.eps is not None else None
    meta = {"clean": str(args.clean), "adv": str(args.adv), "mode": args.mode}
    report = transfer_matrix(load_targets(args.targets), clean, adv, meta, epsilon=eps, mode=args.mode)
    (run / "report.json").write_text(report.to_json())
    return {"report": str(run / "report.json")}


def _load_images(paths, side) -> ImageBatch:
    from .data_io import _decode, resize, uint8_to_unit

    tensors = [resize(uint8_to_unit(_decode(Path(p)))[None], side)[0] for p in paths]
    return ImageBatch(pixels=torch.stack(tensors), ids=[Path(p).name for p in paths])


def cmd_saliency(args, cfg: RunConfig, run: Path) -> dict:
    from .saliency import saliency_from_attention, saliency_to_heatmap
    from .vit import load_vit

    model = load_vit(args.model)
    x = _load_images(args.image, model.cfg.image_side)
    layers = args.layer or [model.cfg.depth - 1]
    out = model.collect(x.pixels, layers, [], want_attention=True)
    paths = []
    for layer in layers:
        S = saliency_from_attention(out.attention, layer, cfg.attack.gamma)
        paths += saliency_to_heatmap(S, model.cfg.grid, args.size, x.ids, run / "heatmaps")
    return {"files": [str(p) for p in paths]}


def cmd_pca(args, cfg: RunConfig, run: Path) -> dict:
    from .evaluator import pca_facets, pca_rgb
    from .vit import load_vit

    model = load_vit(args.model)
    x = _load_images(args.image, model.cfg.image_side)
    layer = (args.layer or [model.cfg.depth - 1])[0]
    feats = model.collect(x.pixels, [layer], [args.facet or "k"]).facets[layer][args.facet or "k"]
    files = []
    for i, name in enumerate(x.ids):
        res = pca_facets(feats[i, 1:], k=3)
        img = pca_rgb(res.scores, model.cfg.grid, args.size)
        p = run / f"{Path(name).stem}_pca_{args.facet or 'k'}{layer}.png"
        Image.fromarray(img, mode="RGB").save(p)
        files.append(str(p))
    return {"files": files}


def _parse_value(axis, v):
    return v if axis == "facet" else (int(v) if axis == "layer" else float(v))


def cmd_sweep(args, cfg: RunConfig, run: Path) -> dict:
    from .targets import load_targets
    from .trainer import sweep

    data = _load_split(cfg, "train")
    eval_data = _load_split(cfg, "test") if cfg.data.test_dir else None
    targets = load_targets(args.targets) if args.targets else ()
    values = [_parse_value(args.axis, v) for v in args.values.split(",")]
    report = sweep(args.axis, values, cfg.attack, data, eval_data, targets)
    (run / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return {"report": str(run / "sweep.json")}


def cmd_toydata(args, cfg: RunConfig, run: Path) -> dict:
    from .toydata import write_toy_dataset

    out = write_toy_dataset(run / "data", seed=cfg.pretrain.seed, side=cfg.data.side)
    return {"data": str(out)}


def cmd_target(args, cfg: RunConfig, run: Path) -> dict:
    from .targets import CNNConfig, accuracy, save_cnn, train_target

    data = _load_split(cfg, "train", need_labels=True)
    model = train_target(data, CNNConfig(num_classes=int(data.labels.max()) + 1), epochs=args.epochs,
                         seed=cfg.attack.seed)
    ckpt = save_cnn(model, run / "cnn")
    manifest = [{"name": "cnn", "kind": "cnn", "checkpoint": "cnn"}]
    (run / "targets.json").write_text(json.dumps(manifest, indent=2))
    res = {"checkpoint": str(ckpt), "targets": str(run / "targets.json")}
    if cfg.data.test_dir:
        res["test_accuracy"] = accuracy(model, _load_split(cfg, "test", need_labels=True))
    return res


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "pca": cmd_pca,
    "sweep": cmd_sweep,
    "toydata": cmd_toydata,
    "target": cmd_target,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--eps", type=float, help="budget on the 0-255 scale")
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--layer", type=int, action="append", help="repeatable for saliency")
    common.add_argument("--facet", choices=FACETS)
    common.add_argument("--no-attention", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dsva", description="Dual-surrogate generative attack toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("pretrain", parents=[common])
    s.add_argument("--kind", choices=("CL", "MIM", "SUP"), required=True)
    sub.add_parser("train", parents=[common])
    s = sub.add_parser("attack", parents=[common])
    s.add_argument("--generator", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--side", type=int)
    s = sub.add_parser("eval", parents=[common])
    s.add_argument("--clean", required=True)
    s.add_argument("--adv", required=True)
    s.add_argument("--targets", required=True, help="targets manifest JSON")
    s.add_argument("--mode", choices=("clean", "label"), default="clean")
    s.add_argument("--side", type=int)
    s = sub.add_parser("saliency", parents=[common])
    s.add_argument("--model", required=True)
    s.add_argument("--image", nargs="+", required=True)
    s.add_argument("--size", type=int, default=224)
    s = sub.add_parser("pca", parents=[common])
    s.add_argument("--model", required=True)
    s.add_argument("--image", nargs="+", required=True)
    s.add_argument("--size", type=int, default=224)
    s = sub.add_parser("sweep", parents=[common])
    s.add_argument("--axis", choices=("facet", "layer", "lambda"), required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--targets")
    sub.add_parser("toydata", parents=[common])
    s = sub.add_parser("target", parents=[common])
    s.add_argument("--epochs", type=int, default=6)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(env_threads())
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        run = make_run_dir(cfg.out, args.command, cfg)
        result = COMMANDS[args.command](args, cfg, run)
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    print(json.dumps({"run_dir": str(run), **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
