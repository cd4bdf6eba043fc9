"""Model zoo tests: architectures per role, training loop, persistence."""

import os

import numpy as np
import pytest

from avbench import nn, zoo
from avbench.errors import DivergenceError, RoleError


def test_roles_build_expected_heads():
    clf = zoo.build_model("passive_classifier", 10, (64, 64), seed=0)
    assert clf.head_kind == "softmax-ce-head"
    assert clf.out_dim() == 10
    enc = zoo.build_model("encoder", 10, (48, 48), seed=0)
    assert enc.head_kind is None
    assert enc.specs[-1].kind == "avgpool-global"
    loc = zoo.build_model("localizer", 10, (48, 48), seed=0)
    assert loc.head_kind == "sigmoid-head"
    assert loc.out_dim() == 5


def test_block_depth_changes_architecture():
    a = zoo.build_model("passive_classifier", 10, (64, 64), seed=0, blocks=3)
    b = zoo.build_model("passive_classifier", 10, (64, 64), seed=0, blocks=4)
    assert len(a.specs) < len(b.specs)


def test_unknown_role_and_resolution_rejected():
    with pytest.raises(RoleError):
        zoo.build_model("oracle", 10, (64, 64))
    with pytest.raises(RoleError):
        zoo.build_model("passive_classifier", 10, (50, 50))
    with pytest.raises(RoleError):
        zoo.build_recurrent("passive_classifier", 8, 8, 8)


def test_recurrent_builder():
    m = zoo.build_recurrent("recurrent_head", 16, 8, 10, seed=1)
    assert [s.kind for s in m.specs] == ["gru-cell", "dense"]
    assert m.specs[0].hp == {"in_dim": 16, "hidden": 8}


def test_lr_schedule_halves():
    c = zoo.TrainConfig(lr=0.1, lr_decay_epochs=2)
    assert c.lr_at(0) == 0.1 and c.lr_at(1) == 0.1
    assert c.lr_at(2) == 0.05 and c.lr_at(4) == 0.025
    const = zoo.TrainConfig(lr=0.1, lr_decay_epochs=0)
    assert const.lr_at(9) == 0.1


def test_training_learns_separable_toy_data():
    rng = np.random.default_rng(3)
    n = 60
    y = np.repeat([0, 1], n // 2)
    x = rng.uniform(0.0, 0.25, size=(n, 3, 48, 48)).astype(np.float32)
    x[y == 1] += 0.6
    m = zoo.build_model("passive_classifier", 2, (48, 48), seed=2, blocks=3)
    m, hist = zoo.train_classifier(m, x, y, zoo.TrainConfig(epochs=4, lr=0.05, seed=0))
    assert hist[-1] < hist[0]
    assert zoo.accuracy(m, x, y) > 0.9


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(20, 3, 48, 48)).astype(np.float32)
    y = rng.integers(0, 4, size=20)
    a = zoo.build_model("passive_classifier", 4, (48, 48), seed=5, blocks=3)
    b = zoo.build_model("passive_classifier", 4, (48, 48), seed=5, blocks=3)
    cfg = zoo.TrainConfig(epochs=2, seed=9)
    a, ha = zoo.train_classifier(a, x, y, cfg)
    b, hb = zoo.train_classifier(b, x, y, cfg)
    assert ha == hb
    for pa, pb in zip(a.params, b.params):
        for k in pa:
            assert np.array_equal(pa[k], pb[k])


def test_divergence_reported_with_location():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(8, 3, 48, 48)).astype(np.float32)
    y = rng.integers(0, 4, size=8)
    m = zoo.build_model("passive_classifier", 4, (48, 48), seed=7, blocks=3)
    with pytest.raises(DivergenceError, match="epoch"):
        zoo.train_classifier(m, x, y, zoo.TrainConfig(epochs=3, lr=1e6, seed=0))


def test_save_load_enforces_role(tmp_path):
    m = zoo.build_model("encoder", 10, (48, 48), seed=0)
    p = os.path.join(tmp_path, "e.avnw")
    zoo.save_model(p, m, "encoder")
    m2 = zoo.load_model(p, "encoder")
    x = np.random.default_rng(0).uniform(size=(2, 3, 48, 48)).astype(np.float32)
    assert np.array_equal(m.forward(x), m2.forward(x))
    with pytest.raises(RoleError):
        zoo.load_model(p, "passive_classifier")
    with pytest.raises(RoleError):
        zoo.save_model(p, m, "whatever")
