"""End-to-end benchmark assembly driven by a RunConfig.

Builds the reference environment: synthetic dataset, passive surrogate
and target classifiers at full and downsampled resolutions, the two
active-vision pipelines, and helpers to persist/restore everything under
a workspace directory.
"""

from __future__ import annotations

import os

import numpy as np

from . import data, falcon, glance_focus, nn, zoo
from .config import RunConfig

# fixed role seeds layered on the global seed so every model differs
SEED_SURROGATE_FULL = 101
SEED_TARGET_FULL = 202
SEED_PASSIVE_LOW = 303
SEED_GFNET = 404
SEED_FALCON = 505


def prepare_dataset(cfg: RunConfig):
    d = cfg.values["data"]
    ds = data.gen_synth_dataset(
        num_classes=d["num_classes"], per_class=d["per_class"],
        h=d["full_h"], w=d["full_w"], clutter_level=d["clutter"],
        seed=cfg.get("run", "seed"), multi_fraction=d["multi_fraction"])
    return data.split_train_test(ds, d["test_per_class"], d["num_classes"])


def _train_cfg(cfg, epochs_key="epochs", lr_key="lr", seed_extra=0,
               decay_key="lr_decay_epochs"):
    t = cfg.values["train"]
    return zoo.TrainConfig(epochs=t[epochs_key], lr=t[lr_key], momentum=t["momentum"],
                           batch_size=t["batch_size"], seed=cfg.get("run", "seed") + seed_extra,
                           lr_decay_epochs=t[decay_key])


def train_passive(cfg, train_ds, role_seed, blocks, res,
                  epochs_key="epochs", lr_key="lr"):
    nc = cfg.get("data", "num_classes")
    seed = cfg.get("run", "seed") * 1000 + role_seed
    model = zoo.build_model("passive_classifier", nc, res, seed=seed, blocks=blocks)
    images = train_ds.pixel_array()
    if res != tuple(images.shape[2:]):
        images = nn.bilinear_resize(images, *res)
    model, hist = zoo.train_classifier(
        model, images, train_ds.label_array(),
        _train_cfg(cfg, epochs_key, lr_key, seed_extra=role_seed))
    return model, hist


def train_gfnet(cfg, train_ds):
    g = cfg.values["gfnet"]
    nc = cfg.get("data", "num_classes")
    pipe = glance_focus.build_pipeline(
        nc, full_res=cfg.full_res(), patch_size=(g["patch"], g["patch"]),
        steps=g["steps"], grid_k=g["grid_k"], hidden=g["hidden"],
        seed=cfg.get("run", "seed") * 1000 + SEED_GFNET)
    # the recurrent pipeline needs a longer schedule with a slower decay
    # than the feed-forward classifiers before the proposer settles
    tc = _train_cfg(cfg, "gfnet_epochs", "gfnet_lr", SEED_GFNET,
                    decay_key="gfnet_lr_decay")
    pipe, hist = glance_focus.train_glance_focus(pipe, train_ds.pixel_array(),
                                                 train_ds.label_array(), tc)
    return pipe, hist


def train_falcon(cfg, train_ds, classifier):
    f = cfg.values["falcon"]
    nc = cfg.get("data", "num_classes")
    loc_cfg = falcon.LocalizeConfig(
        init_size=f["init_size"], step_px=f["step_px"], steps=f["steps"],
        threshold=f["threshold"], grid=f["grid"],
        glimpse_res=cfg.low_res(), nms_iou=f["nms_iou"])
    loc = zoo.build_model("localizer", nc, cfg.low_res(),
                          seed=cfg.get("run", "seed") * 1000 + SEED_FALCON)
    tc = _train_cfg(cfg, "falcon_epochs", "falcon_lr", SEED_FALCON)
    loc, hist = falcon.train_localizer(loc, train_ds, tc, loc_cfg)
    return falcon.FalconPipeline(localizer=loc, classifier=classifier, cfg=loc_cfg), hist


def train_all(cfg, train_ds):
    """Train the full benchmark environment. The low-res passive model
    doubles as the Setting-3 surrogate (the same-architecture row)."""
    env = {"full_res": cfg.full_res(), "low_res": cfg.low_res()}
    low_train = data.Dataset(images=[
        data.LabeledImage(pixels=nn.bilinear_resize(im.pixels[None], *cfg.low_res())[0],
                          labels=im.labels, boxes=_scale_boxes(im, cfg))
        for im in train_ds.images])
    # the shallower surrogate needs a hotter schedule to converge
    env["surrogate_full"], _ = train_passive(cfg, train_ds, SEED_SURROGATE_FULL, 3,
                                             cfg.full_res(), "surrogate_epochs",
                                             "surrogate_lr")
    env["target_full"], _ = train_passive(cfg, train_ds, SEED_TARGET_FULL, 4, cfg.full_res())
    env["passive_full"] = env["target_full"]
    env["passive_low"], _ = train_passive(cfg, low_train, SEED_PASSIVE_LOW, 4, cfg.low_res())
    env["surrogate_low"] = env["passive_low"]
    env["gfnet"], _ = train_gfnet(cfg, train_ds)
    # the frozen classifier is the passive full-res target (shared backbone)
    env["falcon"], _ = train_falcon(cfg, train_ds, env["target_full"])
    return env


def _scale_boxes(im, cfg):
    fh, fw = im.pixels.shape[1:]
    lh, lw = cfg.low_res()
    return [(int(b[0] * lw / fw), int(b[1] * lh / fh),
             max(int(b[2] * lw / fw), int(b[0] * lw / fw) + 1),
             max(int(b[3] * lh / fh), int(b[1] * lh / fh) + 1)) for b in im.boxes]


def save_env(dirpath, env):
    os.makedirs(dirpath, exist_ok=True)
    zoo.save_model(os.path.join(dirpath, "surrogate_full.avnw"), env["surrogate_full"], "passive_classifier")
    zoo.save_model(os.path.join(dirpath, "target_full.avnw"), env["target_full"], "passive_classifier")
    zoo.save_model(os.path.join(dirpath, "passive_low.avnw"), env["passive_low"], "passive_classifier")
    glance_focus.save_pipeline(os.path.join(dirpath, "gfnet"), env["gfnet"])
    falcon.save_pipeline(os.path.join(dirpath, "falcon"), env["falcon"])
    with open(os.path.join(dirpath, "env.txt"), "w") as f:
        f.write(f"full_res={env['full_res'][0]},{env['full_res'][1]}\n")
        f.write(f"low_res={env['low_res'][0]},{env['low_res'][1]}\n")


def load_env(dirpath):
    kv = {}
    with open(os.path.join(dirpath, "env.txt")) as f:
        for line in f:
            k, v = line.strip().split("=", 1)
            kv[k] = tuple(int(t) for t in v.split(","))
    env = {"full_res": kv["full_res"], "low_res": kv["low_res"]}
    env["surrogate_full"] = zoo.load_model(os.path.join(dirpath, "surrogate_full.avnw"), "passive_classifier")
    env["target_full"] = zoo.load_model(os.path.join(dirpath, "target_full.avnw"), "passive_classifier")
    env["passive_full"] = env["target_full"]
    env["passive_low"] = zoo.load_model(os.path.join(dirpath, "passive_low.avnw"), "passive_classifier")
    env["surrogate_low"] = env["passive_low"]
    env["gfnet"] = glance_focus.load_pipeline(os.path.join(dirpath, "gfnet"))
    env["falcon"] = falcon.load_pipeline(os.path.join(dirpath, "falcon"))
    return env


def test_arrays(cfg, test_ds, subset=0):
    """Test images/labels; subset > 0 keeps a seeded random sample."""
    images = test_ds.pixel_array()
    labels = test_ds.label_array()
    if subset and subset < len(labels):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.get("run", "seed"), 999]))
        idx = np.sort(rng.choice(len(labels), size=subset, replace=False))
        return images[idx], labels[idx]
    return images, labels
