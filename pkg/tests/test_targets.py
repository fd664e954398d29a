import json

import numpy as np
import torch

from dsva.checkpoint import state_checksum
from dsva.targets import CNNConfig, load_cnn, load_targets, save_cnn, train_target
from dsva.toydata import make_toy_dataset, write_toy_dataset
from dsva.data_io import load_image_dir
from dsva.vit import ViTConfig, init_surrogate, save_vit


def test_toy_dataset_is_seeded_and_balanced():
    a, _ = make_toy_dataset(n_train=16, n_test=4, seed=3)
    b, _ = make_toy_dataset(n_train=16, n_test=4, seed=3)
    c, _ = make_toy_dataset(n_train=16, n_test=4, seed=4)
    assert torch.equal(a.pixels, b.pixels) and not torch.equal(a.pixels, c.pixels)
    assert a.labels.tolist() == [0, 1] * 8


def test_toy_dataset_survives_png(tmp_path):
    out = write_toy_dataset(tmp_path, n_train=6, n_test=2)
    train, _ = make_toy_dataset(n_train=6, n_test=2)
    labels = json.loads((out / "train" / "labels.json").read_text())
    back = load_image_dir(out / "train", 32, labels)
    assert torch.equal(back.pixels, train.pixels)
    assert torch.equal(back.labels, train.labels)


def test_target_training_is_deterministic():
    data, _ = make_toy_dataset(n_train=32, n_test=4)
    a = train_target(data, CNNConfig(width=4), epochs=1, seed=7)
    b = train_target(data, CNNConfig(width=4), epochs=1, seed=7)
    assert state_checksum(a) == state_checksum(b)


def test_targets_manifest(tmp_path):
    torch.manual_seed(0)
    data, _ = make_toy_dataset(n_train=8, n_test=4)
    save_cnn(train_target(data, CNNConfig(width=4), epochs=1), tmp_path / "cnn")
    save_vit(init_surrogate(ViTConfig(depth=1, dim=16, heads=2, num_classes=2), 0), tmp_path / "vit")
    assert load_cnn(tmp_path / "cnn").cfg.width == 4
    manifest = [
        {"name": "cnn", "kind": "cnn", "checkpoint": "cnn"},
        {"name": "vit", "kind": "vit", "checkpoint": str(tmp_path / "vit")},
        {"name": "gone", "kind": "cnn", "checkpoint": "missing"},
    ]
    (tmp_path / "targets.json").write_text(json.dumps(manifest))
    adapters = load_targets(tmp_path / "targets.json")
    assert [a.name for a in adapters] == ["cnn", "vit", "gone"]
    preds = adapters[0].predict(data)
    assert preds.shape == (8,) and np.isin(preds.numpy(), [0, 1]).all()
    assert adapters[1].predict(data.pixels).shape == (8,)
    try:
        adapters[2].predict(data)
    except RuntimeError as exc:
        assert "missing" in str(exc) or "manifest" in str(exc)
    else:
        raise AssertionError("broken adapter should raise")
