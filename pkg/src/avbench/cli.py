"""Command line entry point.

Layout on disk: every run lives under <out>/run-<confighash>/ so results
from different configurations never mix. Inside a run directory the
dataset and models are shared inputs, while each evaluation command
writes a fresh artifact directory (eval, eval-2, ...) and never
overwrites an existing one.

Exit codes: 0 ok, 2 bad configuration, 3 missing inputs, 4 model role
mismatch, 1 anything else.
"""

import argparse
import os
import sys

import numpy as np

from . import attacks, bench, data, falcon, glance_focus, vizmaps, workflow, zoo
from .config import RunConfig, load as load_config
from .errors import ConfigError, FormatError, RoleError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_ROLE = 4


def build_parser():
    p = argparse.ArgumentParser(prog="avbench",
                                description="active-vision robustness benchmark")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, help="override run seed")
    p.add_argument("--out", help="output root (also AVBENCH_OUT)")
    p.add_argument("--jobs", type=int, help="worker hint (results never depend on it)")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("gen-data", help="generate and persist the synthetic dataset")

    t = sub.add_parser("train", help="train benchmark models")
    t.add_argument("what", choices=["all", "passive", "gfnet", "falcon"])

    a = sub.add_parser("attack", help="craft adversarial examples for the test set")
    _attack_flags(a)
    a.add_argument("--lgv", action="store_true", help="attack through weight snapshots")

    e = sub.add_parser("eval-transfer", help="transfer attack to every target")
    _attack_flags(e)
    e.add_argument("--mode", choices=["top", "any", "multi"], default="top",
                   help="fixation-based target scoring mode")
    e.add_argument("--lgv", action="store_true")

    s = sub.add_parser("settings", help="run a downsampling setting")
    _attack_flags(s)
    s.add_argument("--setting", type=int, choices=[1, 2, 3], required=True)

    m = sub.add_parser("ifpm", help="fixation prediction map for one test image")
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--grid", type=int, help="override fixation grid size")
    _attack_flags(m, optional_kind=True)

    o = sub.add_parser("occlusion", help="occlusion sensitivity map for one test image")
    o.add_argument("--index", type=int, default=0)
    o.add_argument("--window", type=int, default=16)
    o.add_argument("--stride", type=int, default=8)

    r = sub.add_parser("report", help="re-derive the CSV from persisted logs")
    return p


def _attack_flags(sp, optional_kind=False):
    kinds = sorted(attacks.ATTACK_KINDS)
    if optional_kind:
        sp.add_argument("--attack", choices=kinds, default=None,
                        help="also render the map under this attack")
    else:
        sp.add_argument("--attack", choices=kinds, default=None,
                        help="attack kind (default from config)")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--steps", type=int)


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.jobs is not None:
        cfg.set("run", "jobs", args.jobs)
    out = args.out or os.environ.get("AVBENCH_OUT") or cfg.get("run", "out")
    cfg.set("run", "out", out)
    return cfg


def run_dir(cfg):
    d = os.path.join(cfg.get("run", "out"), f"run-{cfg.hash()}")
    os.makedirs(d, exist_ok=True)
    cpath = os.path.join(d, "config.txt")
    if not os.path.exists(cpath):
        with open(cpath, "w") as f:
            f.write(cfg.serialize())
    return d


def fresh_dir(root, name):
    """First free of name, name-2, name-3, ... so nothing is overwritten."""
    path = os.path.join(root, name)
    k = 1
    while os.path.exists(path):
        k += 1
        path = os.path.join(root, f"{name}-{k}")
    os.makedirs(path)
    return path


def _need(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found at {path}; run the producing "
                                "subcommand first")
    return path


def _load_test(cfg, rd):
    dpath = _need(os.path.join(rd, "dataset", "test"), "test dataset")
    ds = data.load_dataset(dpath)
    return workflow.test_arrays(cfg, ds, subset=cfg.get("eval", "subset"))


def _attack_cfg(cfg, args):
    return cfg.attack_config(kind=getattr(args, "attack", None),
                             epsilon=getattr(args, "epsilon", None),
                             alpha=getattr(args, "alpha", None),
                             steps=getattr(args, "steps", None))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg, rd, args):
    train_ds, test_ds = workflow.prepare_dataset(cfg)
    droot = fresh_dir(rd, "dataset")
    data.save_dataset(os.path.join(droot, "train"), train_ds, tag="train")
    data.save_dataset(os.path.join(droot, "test"), test_ds, tag="test")
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test images to {droot}")


def cmd_train(cfg, rd, args):
    train_ds = data.load_dataset(
        _need(os.path.join(rd, "dataset", "train"), "train dataset"))
    mdir = os.path.join(rd, "models")
    os.makedirs(mdir, exist_ok=True)

    if args.what == "all":
        env = workflow.train_all(cfg, train_ds)
        workflow.save_env(mdir, env)
        print(f"trained full environment -> {mdir}")
        return

    if args.what == "passive":
        env = {"full_res": cfg.full_res(), "low_res": cfg.low_res()}
        sur, _ = workflow.train_passive(cfg, train_ds, workflow.SEED_SURROGATE_FULL,
                                     blocks=3, res=cfg.full_res(),
                                     epochs_key="surrogate_epochs",
                                     lr_key="surrogate_lr")
        tgt, _ = workflow.train_passive(cfg, train_ds, workflow.SEED_TARGET_FULL,
                                     blocks=4, res=cfg.full_res())
        low, _ = workflow.train_passive(cfg, train_ds, workflow.SEED_PASSIVE_LOW,
                                     blocks=4, res=cfg.low_res())
        zoo.save_model(os.path.join(mdir, "surrogate_full.avnw"), sur, "passive_classifier")
        zoo.save_model(os.path.join(mdir, "target_full.avnw"), tgt, "passive_classifier")
        zoo.save_model(os.path.join(mdir, "passive_low.avnw"), low, "passive_classifier")
        with open(os.path.join(mdir, "env.txt"), "w") as f:
            f.write(f"full_res={env['full_res'][0]},{env['full_res'][1]}\n")
            f.write(f"low_res={env['low_res'][0]},{env['low_res'][1]}\n")
        print(f"trained passive models -> {mdir}")
    elif args.what == "gfnet":
        pipe, _ = workflow.train_gfnet(cfg, train_ds)
        glance_focus.save_pipeline(os.path.join(mdir, "gfnet"), pipe)
        print(f"trained glance-focus pipeline -> {mdir}/gfnet")
    elif args.what == "falcon":
        clf = zoo.load_model(
            _need(os.path.join(mdir, "target_full.avnw"), "classifier model"),
            "passive_classifier")
        pipe, _ = workflow.train_falcon(cfg, train_ds, clf)
        falcon.save_pipeline(os.path.join(mdir, "falcon"), pipe)
        print(f"trained fixation localizer -> {mdir}/falcon")


def _load_env(rd):
    mdir = _need(os.path.join(rd, "models"), "models")
    _need(os.path.join(mdir, "env.txt"), "trained environment")
    return workflow.load_env(mdir)


def _model_set(cfg, env, train_images, train_labels):
    lg = cfg.values["lgv"]
    return attacks.lgv_collect(env["surrogate_full"], train_images, train_labels,
                               lr_high=lg["lr_high"], epochs=lg["epochs"],
                               snapshots_per_epoch=lg["snapshots_per_epoch"],
                               batch_size=lg["batch_size"],
                               seed=cfg.get("run", "seed") + 77)


def _lgv_inputs(cfg, rd):
    train_ds = data.load_dataset(
        _need(os.path.join(rd, "dataset", "train"), "train dataset"))
    return train_ds.pixel_array(), train_ds.label_array()


def cmd_attack(cfg, rd, args):
    env = _load_env(rd)
    images, labels = _load_test(cfg, rd)
    acfg = _attack_cfg(cfg, args)
    model_set = None
    if args.lgv:
        model_set = _model_set(cfg, env, *_lgv_inputs(cfg, rd))
    batch = bench.generate_adv(env["surrogate_full"], "surrogate_full", acfg,
                               images, labels, model_set=model_set)
    batch.check_invariants()
    adir = fresh_dir(rd, "attack")
    path = os.path.join(adir, f"{acfg.kind}.avadv")
    attacks.save_batch(path, batch)
    print(f"{acfg.kind}: fooled surrogate on "
          f"{batch.fooled_surrogate.mean():.3f} of {len(labels)} images -> {path}")


def cmd_eval_transfer(cfg, rd, args):
    env = _load_env(rd)
    images, labels = _load_test(cfg, rd)
    acfg = _attack_cfg(cfg, args)
    model_set = None
    if args.lgv:
        model_set = _model_set(cfg, env, *_lgv_inputs(cfg, rd))
    targets = [
        bench.PassiveTarget(env["target_full"], "passive_full"),
        bench.GlanceFocusTarget(env["gfnet"], "glance_focus"),
        bench.FalconTarget(env["falcon"], f"falcon_{args.mode}", mode=args.mode),
    ]
    rep = bench.transfer_eval(env["surrogate_full"], "surrogate_full", acfg,
                              targets, images, labels, setting="",
                              resolution=f"{env['full_res'][0]}x{env['full_res'][1]}",
                              model_set=model_set)
    edir = fresh_dir(rd, "eval")
    _persist_report(edir, rep, cfg)
    for r in rep.rows:
        print(f"{r['target']}: clean {r['clean_acc']:.3f} adv {r['adv_acc']:.3f}")
    print(f"report -> {edir}")


def cmd_settings(cfg, rd, args):
    env = _load_env(rd)
    images, labels = _load_test(cfg, rd)
    acfg = _attack_cfg(cfg, args)
    rep = bench.run_setting(args.setting, env, acfg, images, labels)
    sdir = fresh_dir(rd, f"setting{args.setting}")
    _persist_report(sdir, rep, cfg)
    for r in rep.rows:
        print(f"{r['target']}: clean {r['clean_acc']:.3f} adv {r['adv_acc']:.3f}")
    print(f"report -> {sdir}")


def _persist_report(adir, rep, cfg):
    with open(os.path.join(adir, "report.csv"), "w") as f:
        f.write(rep.to_csv(cfg.hash()))
    meta = []
    for i, key in enumerate(sorted(rep.logs)):
        logname = f"log_{i:03d}.txt"
        with open(os.path.join(adir, logname), "w") as f:
            f.write("\n".join(rep.logs[key]) + "\n")
        meta.append("|".join([*map(str, key), logname]))
    with open(os.path.join(adir, "rows.meta"), "w") as f:
        f.write(f"# config={cfg.hash()}\n")
        f.write("\n".join(meta) + "\n")


def cmd_ifpm(cfg, rd, args):
    env = _load_env(rd)
    images, labels = _load_test(cfg, rd)
    if not 0 <= args.index < len(labels):
        raise ConfigError(f"--index {args.index} outside test set of {len(labels)}")
    pipe = env["falcon"]
    if args.grid:
        pipe = falcon.FalconPipeline(
            localizer=pipe.localizer, classifier=pipe.classifier,
            cfg=falcon.LocalizeConfig(**{**pipe.cfg.__dict__, "grid": args.grid}))
    mdir = fresh_dir(rd, "ifpm")
    variants = [("clean", images[args.index])]
    if args.attack:
        acfg = _attack_cfg(cfg, args)
        batch = attacks.run_attack(env["surrogate_full"],
                                   images[args.index:args.index + 1],
                                   labels[args.index:args.index + 1], acfg,
                                   surrogate_id="surrogate_full",
                                   index_offset=args.index)
        variants.append((acfg.kind, batch.adv[0]))
    for tag, x in variants:
        m = vizmaps.build_ifpm(pipe, x, int(labels[args.index]), image_id=args.index)
        vizmaps.render_ifpm_ppm(m, x, os.path.join(mdir, f"ifpm_{tag}.ppm"),
                                comment=f"image={args.index} {tag}")
        vizmaps.render_ifpm_ppm(m, x, os.path.join(mdir, f"ifpm_{tag}_potential.ppm"),
                                comment=f"image={args.index} {tag} potential",
                                show="potential")
        with open(os.path.join(mdir, f"ifpm_{tag}.txt"), "w") as f:
            f.write(m.text_grid() + "\n")
        stats = bench.precision_stats([m])
        prec = "n/a" if stats["precision"] is None else f"{stats['precision']:.3f}"
        print(f"{tag}: {stats['correct_total']}/{stats['potential_total']} "
              f"correct/potential, precision {prec}")
    print(f"maps -> {mdir}")


def cmd_occlusion(cfg, rd, args):
    env = _load_env(rd)
    images, labels = _load_test(cfg, rd)
    if not 0 <= args.index < len(labels):
        raise ConfigError(f"--index {args.index} outside test set of {len(labels)}")
    x = images[args.index]
    occ = vizmaps.occlusion_map(env["target_full"].predict_probs, x,
                                int(labels[args.index]),
                                window=args.window, stride=args.stride)
    odir = fresh_dir(rd, "occlusion")
    path = os.path.join(odir, f"occlusion_{args.index:05d}.ppm")
    vizmaps.render_occlusion_ppm(occ, x, path,
                                 comment=f"image={args.index} w={args.window} s={args.stride}")
    print(f"heat {occ.heat.shape[0]}x{occ.heat.shape[1]}, "
          f"peak drop {occ.heat.max():.3f} -> {path}")


def cmd_report(cfg, rd, args):
    """Rebuild the CSV purely from the persisted per-image logs."""
    rows = []
    hashes = set()
    for name in sorted(os.listdir(rd)):
        adir = os.path.join(rd, name)
        meta = os.path.join(adir, "rows.meta")
        if not os.path.isfile(meta):
            continue
        with open(meta) as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith("# config="):
            raise FormatError(f"{meta}: missing config header")
        hashes.add(lines[0].split("=", 1)[1])
        for line in lines[1:]:
            if not line:
                continue
            surrogate, attack, target, setting, logname = line.split("|")
            with open(os.path.join(adir, logname)) as f:
                log = f.read().splitlines()
            rows.append({
                "surrogate": surrogate, "attack": attack, "target": target,
                "setting": setting, "resolution": "", "N": len(log),
                "clean_acc": bench.accuracy_from_log(log, "clean"),
                "adv_acc": bench.accuracy_from_log(log, "adv"),
                "precision": None,
            })
    if not rows:
        raise FileNotFoundError(f"no persisted evaluation logs under {rd}")
    if len(hashes) > 1:
        raise ConfigError(f"refusing to merge logs from mixed configs: {sorted(hashes)}")
    rep = bench.TransferReport()
    for r in rows:
        rep.add(**r)
    rdir = fresh_dir(rd, "report")
    out = os.path.join(rdir, "report.csv")
    with open(out, "w") as f:
        f.write(rep.to_csv(hashes.pop()))
    print(f"{len(rows)} rows -> {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval-transfer": cmd_eval_transfer,
    "settings": cmd_settings,
    "ifpm": cmd_ifpm,
    "occlusion": cmd_occlusion,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        rd = run_dir(cfg)
        COMMANDS[args.cmd](cfg, rd, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except RoleError as e:
        print(f"role mismatch: {e}", file=sys.stderr)
        return EXIT_ROLE
    except (FormatError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
