"""Acceptance gate: the reference benchmark, one criterion per test.

Every test prints a single CRITERION n PASS/FAIL line. The reference
benchmark is 10 classes, 2000 train / 500 test images, 128x128 full
resolution, 48x48 downsampled, seed 42. Building it is expensive, so one
session fixture trains everything and crafts every adversarial set once.
"""

import os
import time

import numpy as np
import pytest

from avbench import attacks, bench, cli, falcon, glance_focus, nn, vizmaps, workflow
from avbench.config import RunConfig
from util import check_model_grads, numeric_grad, rel_err

EPS = 8 / 255
SUB_FALCON = 100   # fixation-based targets are costly; seeded subset
SUB_IFPM = 50


def crit(n, ok, detail):
    print(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def _subset(n_total, n_keep, tag):
    rng = np.random.default_rng(np.random.SeedSequence([42, 555, tag]))
    return np.sort(rng.choice(n_total, size=n_keep, replace=False))


@pytest.fixture(scope="session")
def R():
    cfg = RunConfig()
    timings = {}

    t0 = time.time()
    train_ds, test_ds = workflow.prepare_dataset(cfg)
    env = workflow.train_all(cfg, train_ds)
    timings["train"] = time.time() - t0

    images = test_ds.pixel_array()
    labels = test_ds.label_array()
    assert len(labels) == 500

    adv = {}
    for kind in ("fgsm", "bim", "pgd", "mifgsm", "vmifgsm", "pifgsm"):
        t0 = time.time()
        adv[kind] = bench.generate_adv(env["surrogate_full"], "surrogate_full",
                                       cfg.attack_config(kind=kind), images, labels)
        timings[kind] = time.time() - t0

    return {
        "cfg": cfg, "env": env, "train_ds": train_ds,
        "images": images, "labels": labels, "adv": adv, "timings": timings,
        "sub_falcon": _subset(500, SUB_FALCON, 1),
        "sub_ifpm": _subset(500, SUB_IFPM, 2),
    }


def _passive_acc(model, x, y):
    return float(bench.PassiveTarget(model, "p").correct(x, y).mean())


def _gfnet_acc(pipe, x, y):
    return float((glance_focus.predict_labels(pipe, x) == y).mean())


def _falcon_acc(pipe, x, y, mode):
    _, ok = falcon.predict_labels(pipe, x, mode=mode, truths=y)
    return float(ok.mean())


def test_criterion_01_gradients():
    t0 = time.time()
    worst = 0.0
    rng = np.random.default_rng(5)
    # conv / relu / maxpool / global-avgpool / dense under both heads
    for head, y in (("softmax-ce-head", np.array([0, 2, 4])),
                    ("sigmoid-head", (rng.uniform(size=(3, 5)) > 0.5).astype(np.float64))):
        specs = [
            nn.LayerSpec("conv2d", {"in_ch": 2, "out_ch": 4, "kernel": 3,
                                    "stride": 2, "pad": 1}),
            nn.LayerSpec("relu"),
            nn.LayerSpec("maxpool", {"kernel": 2}),
            nn.LayerSpec("conv2d", {"in_ch": 4, "out_ch": 6, "kernel": 3,
                                    "stride": 1, "pad": 1}),
            nn.LayerSpec("relu"),
            nn.LayerSpec("avgpool-global"),
            nn.LayerSpec("dense", {"in_dim": 6, "out_dim": 5}),
            nn.LayerSpec(head),
        ]
        m = nn.Model.build(specs, (2, 8, 8), seed=11)
        x = rng.uniform(size=(3, 2, 8, 8)).astype(np.float32)
        worst = max(worst, check_model_grads(m, x, y))

    # recurrent cell, all parameters plus both input paths
    spec = nn.LayerSpec("gru-cell", {"in_dim": 4, "hidden": 6})
    p = nn.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    x = rng.normal(size=(3, 4))
    h = rng.normal(size=(3, 6))
    tgt = rng.normal(size=(3, 6))

    def loss(x_, h_, p_):
        hn, _ = nn.gru_forward(x_, h_, p_)
        return 0.5 * float(((hn - tgt) ** 2).sum())

    hn, cache = nn.gru_forward(x, h, p)
    dx, dh, grads = nn.gru_backward(hn - tgt, p, cache)
    worst = max(worst, rel_err(numeric_grad(lambda xx: loss(xx, h, p), x.copy()), dx))
    worst = max(worst, rel_err(numeric_grad(lambda hh: loss(x, hh, p), h.copy()), dh))
    for name in p:
        num = numeric_grad(lambda ww, nm=name: loss(x, h, {**p, nm: ww}), p[name].copy())
        worst = max(worst, rel_err(num, grads[name]))
    dt = time.time() - t0
    crit(1, worst < 1e-4 and dt < 60,
         f"worst finite-difference rel error {worst:.2e} in {dt:.1f}s")


def test_criterion_02_attack_invariants(R):
    env, images, labels = R["env"], R["images"], R["labels"]
    bad = []
    for kind, batch in R["adv"].items():
        linf = np.abs(batch.adv - batch.clean).max()
        in_range = batch.adv.min() >= 0.0 and batch.adv.max() <= 1.0
        if linf > EPS + 1e-6 or not in_range:
            bad.append(f"{kind} linf={linf:.6f}")
    # bit-exact reduction identities on a seeded subset
    sub = R["sub_falcon"]
    x, y = images[sub], labels[sub]
    sur = env["surrogate_full"]

    def craft(**kw):
        return attacks.run_attack(sur, x, y, R["cfg"].attack_config(**kw),
                                  surrogate_id="s").adv

    pairs = [
        ("vmi(N=0)=mi", craft(kind="vmifgsm", vmi_neighbors=0), craft(kind="mifgsm")),
        ("mi(mu=0)=bim", craft(kind="mifgsm", mu=0.0), craft(kind="bim")),
        ("pi(amp=1,k=1)=bim", craft(kind="pifgsm", pifgsm_amp=1.0, pifgsm_kernel=1),
         craft(kind="bim")),
        ("pgd(no rs)=bim", craft(kind="pgd", random_start=False), craft(kind="bim")),
        ("steps=0 id", craft(kind="pgd", steps=0, random_start=False), x),
    ]
    for name, a, b in pairs:
        if not np.array_equal(a, b):
            bad.append(name)
    crit(2, not bad, f"6 attacks within the epsilon ball on all 500 images, "
         f"5 reductions bit-exact" + (f"; FAILED {bad}" if bad else ""))


def test_criterion_03_white_box(R):
    batch = R["adv"]["pgd"]
    acc = _passive_acc(R["env"]["surrogate_full"], batch.adv, R["labels"])
    dt = R["timings"]["pgd"]
    crit(3, acc <= 0.05 and dt < 300,
         f"white-box PGD leaves surrogate at {acc:.3f} (crafted in {dt:.0f}s)")


def test_criterion_04_transfer_ordering(R):
    env, labels = R["env"], R["labels"]
    batch = R["adv"]["pgd"]
    passive = _passive_acc(env["target_full"], batch.adv, labels)
    gf = _gfnet_acc(env["gfnet"], batch.adv, labels)
    sub = R["sub_falcon"]
    passive_sub = _passive_acc(env["target_full"], batch.adv[sub], labels[sub])
    fc = _falcon_acc(env["falcon"], batch.adv[sub], labels[sub], "top")
    R["crit4"] = {"passive": passive, "gf": gf, "fc": fc, "passive_sub": passive_sub}
    crit(4, gf >= passive + 0.10 and fc >= passive_sub + 0.10,
         f"PGD transfer acc: passive {passive:.3f}, glance-focus {gf:.3f}, "
         f"fixation-top {fc:.3f} (passive on same subset {passive_sub:.3f})")


def test_criterion_05_attack_strength(R):
    env, labels = R["env"], R["labels"]
    accs = {k: _passive_acc(env["target_full"], R["adv"][k].adv, labels)
            for k in ("vmifgsm", "mifgsm", "pgd")}
    ok = (accs["vmifgsm"] <= accs["mifgsm"] + 0.02
          and accs["mifgsm"] <= accs["pgd"] + 0.02)
    crit(5, ok, f"passive acc vmi {accs['vmifgsm']:.3f} <= mi "
         f"{accs['mifgsm']:.3f} <= pgd {accs['pgd']:.3f} (+2pt slack)")


def test_criterion_06_setting2(R):
    rep = bench.run_setting(2, R["env"], R["cfg"].attack_config(),
                            R["images"], R["labels"])
    full = rep.row(target="passive_full")["adv_acc"]
    low = rep.row(target="passive_low")["adv_acc"]
    R["setting2"] = rep
    crit(6, low >= full + 0.10,
         f"downsampling recovers {low:.3f} vs {full:.3f} full-res adversarial")


def test_criterion_07_setting3(R):
    rep3 = bench.run_setting(3, R["env"], R["cfg"].attack_config(),
                             R["images"], R["labels"])
    if "setting2" not in R:
        R["setting2"] = bench.run_setting(2, R["env"], R["cfg"].attack_config(),
                                          R["images"], R["labels"])
    s2_low = R["setting2"].row(target="passive_low")["adv_acc"]
    s3_low = rep3.row(target="passive_low")["adv_acc"]
    s3_gf = rep3.row(target="glance_focus")["adv_acc"]
    crit(7, s3_low <= s2_low - 0.10 and s3_gf >= s3_low + 0.10,
         f"low-res attack drops passive to {s3_low:.3f} (setting 2: {s2_low:.3f}); "
         f"glance-focus holds {s3_gf:.3f}")


def test_criterion_08_snapshot_attack(R):
    cfg, env, labels = R["cfg"], R["env"], R["labels"]
    lg = cfg.values["lgv"]
    model_set = attacks.lgv_collect(
        env["surrogate_full"], R["train_ds"].pixel_array(),
        R["train_ds"].label_array(), lr_high=lg["lr_high"], epochs=lg["epochs"],
        snapshots_per_epoch=lg["snapshots_per_epoch"],
        batch_size=lg["batch_size"], seed=42 + 77)
    batch = bench.generate_adv(env["surrogate_full"], "surrogate_full",
                               cfg.attack_config(), R["images"], labels,
                               model_set=model_set)
    passive_lgv = _passive_acc(env["target_full"], batch.adv, labels)
    passive_pgd = _passive_acc(env["target_full"], R["adv"]["pgd"].adv, labels)
    gf = _gfnet_acc(env["gfnet"], batch.adv, labels)
    sub = R["sub_falcon"]
    passive_sub = _passive_acc(env["target_full"], batch.adv[sub], labels[sub])
    fc = _falcon_acc(env["falcon"], batch.adv[sub], labels[sub], "top")
    R["adv_lgv"] = batch
    crit(8, passive_lgv <= passive_pgd and gf >= passive_lgv + 0.10
         and fc >= passive_sub + 0.10,
         f"snapshot attack: passive {passive_lgv:.3f} (plain PGD {passive_pgd:.3f}), "
         f"glance-focus {gf:.3f}, fixation-top {fc:.3f}")


def test_criterion_09_fixation_maps(R):
    env, labels = R["env"], R["labels"]
    sub = R["sub_ifpm"]
    adv = R["adv"]["pgd"].adv
    maps_clean, maps_adv = [], []
    contain_ok = True
    fewer = 0
    for i in sub:
        mc = vizmaps.build_ifpm(env["falcon"], R["images"][i], int(labels[i]),
                                image_id=int(i))
        ma = vizmaps.build_ifpm(env["falcon"], adv[i], int(labels[i]),
                                image_id=int(i))
        for m in (mc, ma):
            g2 = m.grid * m.grid
            if (len(m.statuses) != g2 or m.potential > g2
                    or m.count(vizmaps.CORRECT) > m.potential
                    or any(s not in vizmaps.STATUS_CHAR for s in m.statuses)):
                contain_ok = False
        fewer += mc.count(vizmaps.CORRECT) >= ma.count(vizmaps.CORRECT)
        maps_clean.append(mc)
        maps_adv.append(ma)
    p_clean = bench.precision_stats(maps_clean)["precision"]
    p_adv = bench.precision_stats(maps_adv)["precision"]

    subf = R["sub_falcon"]
    _, top_ok = falcon.predict_labels(env["falcon"], adv[subf], mode="top",
                                      truths=labels[subf])
    _, any_ok = falcon.predict_labels(env["falcon"], adv[subf], mode="any",
                                      truths=labels[subf])
    implied = bool(np.all(any_ok >= top_ok))
    gap = float(any_ok.mean() - top_ok.mean())
    crit(9, contain_ok and p_clean is not None and p_adv is not None
         and p_clean >= p_adv and implied and gap > 0,
         f"containments exact on {2 * len(sub)} maps, precision clean "
         f"{p_clean:.3f} >= adv {p_adv:.3f}, any-top gap {gap:+.3f} "
         f"(clean-correct >= adv-correct on {fewer}/{len(sub)})")


MICRO_CONFIG = """
[run]
seed=11
[data]
num_classes=3
per_class=3
test_per_class=1
full_h=64
full_w=64
[train]
epochs=1
batch_size=4
gfnet_epochs=1
falcon_epochs=1
[attack]
steps=2
[gfnet]
steps=2
grid_k=3
hidden=16
[falcon]
steps=2
grid=3
"""


def _run_flow(root):
    os.makedirs(root, exist_ok=True)
    cpath = os.path.join(root, "micro.cfg")
    with open(cpath, "w") as f:
        f.write(MICRO_CONFIG)
    base = ["--config", cpath, "--out", os.path.join(root, "out")]
    for args in (["gen-data"], ["train", "all"], ["attack"],
                 ["eval-transfer"], ["settings", "--setting", "2"],
                 ["ifpm", "--index", "0", "--attack", "pgd"],
                 ["occlusion", "--index", "0"], ["report"]):
        assert cli.main(base + args) == 0, args
    out = os.path.join(root, "out")
    rd = os.path.join(out, os.listdir(out)[0])
    blobs = {}
    for dirpath, _, names in os.walk(rd):
        for name in sorted(names):
            if name == "config.txt":   # records the out path, which differs
                continue
            if name.endswith((".csv", ".ppm", ".meta", ".txt")):
                rel = os.path.relpath(os.path.join(dirpath, name), rd)
                with open(os.path.join(dirpath, name), "rb") as f:
                    blobs[rel] = f.read()
    return blobs


def test_criterion_10_determinism(tmp_path, capsys):
    a = _run_flow(str(tmp_path / "a"))
    b = _run_flow(str(tmp_path / "b"))
    capsys.readouterr()
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a)
    diff = [k for k in a if a.get(k) != b.get(k)]
    crit(10, same, f"{len(a)} artifacts byte-identical across reruns"
         + (f"; differ: {diff}" if diff else ""))
