"""Desk-scale architectures, training loop, and role-tagged persistence.

Roles:
    passive_classifier  full classifier, softmax-CE head
    encoder             conv feature extractor ending in global avg pool
                        (used as the glance/focus encoders)
    localizer           5-logit sigmoid head (4 expansion actions + switch)
    recurrent_head      gru-cell + dense class head (driven externally)
    proposer            gru-cell + dense grid head (driven externally)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DivergenceError, RoleError

SUPPORTED_RESOLUTIONS = {(224, 224), (128, 128), (96, 96), (64, 64), (48, 48)}

ROLES = ("passive_classifier", "encoder", "localizer", "recurrent_head", "proposer")


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    lr_decay_epochs: int = 0     # 0 = constant lr; else halve every N epochs
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def lr_at(self, epoch):
        if self.lr_decay_epochs <= 0:
            return self.lr
        return self.lr * (0.5 ** (epoch // self.lr_decay_epochs))


def _conv_block(in_ch, out_ch):
    return [
        nn.LayerSpec("conv2d", {"in_ch": in_ch, "out_ch": out_ch, "kernel": 3, "stride": 1, "pad": 1}),
        nn.LayerSpec("relu"),
        nn.LayerSpec("maxpool", {"kernel": 2}),
    ]


def _backbone(blocks, widths):
    specs = []
    in_ch = 3
    for i in range(blocks):
        specs += _conv_block(in_ch, widths[i])
        in_ch = widths[i]
    specs.append(nn.LayerSpec("avgpool-global"))
    return specs, in_ch


def build_model(role, num_classes, input_resolution, seed=0, blocks=4):
    """Deterministic architecture for (role, resolution, seed).

    blocks selects depth within the same conv family (3 vs 4) so surrogate
    and target architectures can differ.
    """
    if role not in ROLES:
        raise RoleError(f"unknown role {role!r}")
    h, w = input_resolution
    if (h, w) not in SUPPORTED_RESOLUTIONS:
        raise RoleError(f"unsupported resolution {input_resolution} for role {role!r}")
    widths = ([32, 64, 128, 128] if blocks == 4 else [32, 64, 128])[:blocks]

    if role in ("passive_classifier", "encoder", "localizer"):
        specs, feat = _backbone(blocks, widths)
        if role == "passive_classifier":
            specs.append(nn.LayerSpec("dense", {"in_dim": feat, "out_dim": num_classes}))
            specs.append(nn.LayerSpec("softmax-ce-head"))
        elif role == "localizer":
            specs.append(nn.LayerSpec("dense", {"in_dim": feat, "out_dim": 5}))
            specs.append(nn.LayerSpec("sigmoid-head"))
        return nn.Model.build(specs, (3, h, w), seed)

    # recurrent_head / proposer take feature vectors, not images
    raise RoleError(f"role {role!r} is built via build_recurrent()")


def build_recurrent(role, in_dim, hidden, out_dim, seed=0):
    """GRU cell + dense output head, used as recurrent/proposer modules."""
    if role not in ("recurrent_head", "proposer"):
        raise RoleError(f"build_recurrent does not handle role {role!r}")
    specs = [
        nn.LayerSpec("gru-cell", {"in_dim": in_dim, "hidden": hidden}),
        nn.LayerSpec("dense", {"in_dim": hidden, "out_dim": out_dim}),
    ]
    return nn.Model.build(specs, (3, 48, 48), seed)


def train_classifier(model, images, labels, cfg: TrainConfig):
    """Supervised CE training; returns (model, per-epoch mean loss)."""
    n = images.shape[0]
    if labels.min() < 0:
        raise ValueError("negative label")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    vel = nn.make_velocity(model.params)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        lr = cfg.lr_at(epoch)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads, _ = nn.loss_and_grads(model, images[idx], labels[idx])
            except FloatingPointError as e:
                raise DivergenceError(
                    f"{e} at epoch {epoch}, batch {start // cfg.batch_size}") from e
            if not np.isfinite(loss):
                raise DivergenceError(f"NaN loss at epoch {epoch}, batch {start // cfg.batch_size}")
            nn.sgd_step(model.params, grads, vel, lr, cfg.momentum)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return model, history


def accuracy(model, images, labels, batch=64):
    correct = 0
    for s in range(0, images.shape[0], batch):
        probs = model.predict_probs(images[s:s + batch])
        correct += int((probs.argmax(axis=1) == labels[s:s + batch]).sum())
    return correct / images.shape[0]


def save_model(path, model, role):
    if role not in ROLES:
        raise RoleError(f"unknown role {role!r}")
    nn.save_model(path, model, role=role)


def load_model(path, role):
    model, _ = nn.load_model(path, expect_role=role)
    return model
