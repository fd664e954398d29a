import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dsva.cli import RunConfig, main


def run_ok(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return json.loads(captured.out.strip().splitlines()[-1])


def run_fail(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    from dsva.toydata import write_toy_dataset

    data = write_toy_dataset(root / "data", n_train=32, n_test=8)
    config = {
        "attack": {
            "epsilon": 16,
            "steps": 2,
            "batch_size": 4,
            "surrogate_I": {"checkpoint": "", "facet": "k", "layer": 1},
            "generator": {"base_width": 8, "n_res_blocks": 1, "downsamples": 2},
        },
        "vit": {"depth": 2, "dim": 32, "heads": 4},
        "pretrain": {"steps": 2, "batch_size": 8},
        "data": {"train_dir": str(data / "train"), "test_dir": str(data / "test")},
        "out": str(root / "runs"),
    }
    return root, config


def write_config(root, config, name="cfg.json"):
    p = Path(root) / name
    p.write_text(json.dumps(config))
    return p


def test_unknown_key_is_rejected_by_name(capsys, workspace):
    root, config = workspace
    bad = {**config, "attack": {**config["attack"], "lamda": 0.3}}
    err = run_fail(capsys, "train", "--config", write_config(root, bad, "bad.json"))
    assert "lamda" in err["message"]
    err = run_fail(capsys, "train", "--config", write_config(root, {**config, "extra": 1}, "bad2.json"))
    assert "extra" in err["message"]


def test_epsilon_is_stored_normalized(workspace):
    _, config = workspace
    cfg = RunConfig.from_dict(config)
    assert cfg.attack.epsilon == pytest.approx(16 / 255)
    assert cfg.to_dict()["attack"]["epsilon"] == pytest.approx(16)
    with pytest.raises(ValueError):
        RunConfig.from_dict({**config, "attack": {**config["attack"], "epsilon": 300}})


def test_missing_file_gives_json_error(capsys, tmp_path):
    err = run_fail(capsys, "train", "--config", tmp_path / "nope.json")
    assert err["error"] == "FileNotFoundError"


def test_full_command_chain(capsys, workspace):
    root, config = workspace
    cfg_path = write_config(root, config)

    res = run_ok(capsys, "pretrain", "--kind", "MIM", "--config", cfg_path)
    ckpt = res["checkpoint"]
    run_dir = Path(res["run_dir"])
    assert json.loads((run_dir / "config.json").read_text())["attack"]["epsilon"] == 16
    assert (run_dir / "history.jsonl").is_file()

    config2 = json.loads(json.dumps(config))
    config2["attack"]["surrogate_I"]["checkpoint"] = ckpt
    cfg2 = write_config(root, config2, "cfg2.json")
    a = run_ok(capsys, "train", "--config", cfg2, "--seed", 5, "--no-attention")
    resolved = Path(a["run_dir"]) / "config.json"
    assert json.loads(resolved.read_text())["attack"]["use_attention"] is False
    # the copied config alone reproduces the checkpoint
    b = run_ok(capsys, "train", "--config", resolved)
    assert a["checksum"] == b["checksum"]
    assert len((Path(a["run_dir"]) / "train_log.jsonl").read_text().splitlines()) == 2

    test_dir = Path(config["data"]["test_dir"])
    att = run_ok(capsys, "attack", "--config", cfg2, "--generator", a["checkpoint"], "--input", test_dir)
    adv_dir = Path(att["adv_dir"])
    for p in sorted(test_dir.glob("*.png")):
        clean = np.asarray(Image.open(p)).astype(int)
        adv = np.asarray(Image.open(adv_dir / p.name)).astype(int)
        assert np.abs(adv - clean).max() <= round(16 / 255 * 255)
    assert len(list((Path(att["run_dir"]) / "delta").glob("*.dten"))) == 8

    tgt = run_ok(capsys, "target", "--config", cfg2, "--epochs", 1)
    rep = run_ok(capsys, "eval", "--config", cfg2, "--clean", test_dir, "--adv", test_dir, "--targets", tgt["targets"])
    report = json.loads(Path(rep["report"]).read_text())
    assert report["targets"]["cnn"]["fooling_rate"] == 0.0
    rep = run_ok(capsys, "eval", "--config", cfg2, "--clean", test_dir, "--adv", adv_dir, "--targets", tgt["targets"],
                 "--eps", 16)
    report = json.loads(Path(rep["report"]).read_text())
    assert report["targets"]["cnn"]["n"] == 8
    rep = run_ok(capsys, "eval", "--config", cfg2, "--clean", test_dir, "--adv", test_dir, "--targets", tgt["targets"],
                 "--mode", "label")
    assert json.loads(Path(rep["report"]).read_text())["attack"]["mode"] == "label"

    imgs = sorted(test_dir.glob("*.png"))[:2]
    sal = run_ok(capsys, "saliency", "--config", cfg2, "--model", ckpt, "--layer", 1, "--layer", 2,
                 "--image", *imgs, "--size", 64)
    assert len(sal["files"]) == 4
    pca = run_ok(capsys, "pca", "--config", cfg2, "--model", ckpt, "--facet", "k", "--layer", 2, "--image", imgs[0])
    assert Image.open(pca["files"][0]).mode == "RGB"

    sw = run_ok(capsys, "sweep", "--config", cfg2, "--axis", "lambda", "--values", "0,1")
    assert set(json.loads(Path(sw["report"]).read_text())["runs"]) == {"0.0", "1.0"}
