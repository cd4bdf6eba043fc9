"""Transfer-attack protocol, downsampling settings, and report assembly.

The protocol: craft adversarial examples once per (surrogate, attack),
then evaluate every target on the identical tensors. Accuracy under
attack is the fraction of adversarial inputs the target still labels
correctly; higher means more robust.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import attacks, falcon, glance_focus, nn, vizmaps
from .errors import ShapeError


# ---------------------------------------------------------------------------
# target adapters: anything with an id and correct(x, labels) -> bool array

class PassiveTarget:
    def __init__(self, model, target_id, preprocess=None):
        self.model = model
        self.id = target_id
        self.preprocess = preprocess

    def predict(self, x, batch=64):
        if self.preprocess is not None:
            x = self.preprocess(x)
        if tuple(x.shape[1:]) != self.model.input_shape:
            raise ShapeError(
                f"target {self.id!r} expects {self.model.input_shape}, got {tuple(x.shape[1:])}")
        out = np.empty(x.shape[0], dtype=np.int64)
        for s in range(0, x.shape[0], batch):
            out[s:s + batch] = self.model.predict_probs(x[s:s + batch]).argmax(axis=1)
        return out

    def correct(self, x, labels):
        return self.predict(x) == labels


class GlanceFocusTarget:
    def __init__(self, pipeline, target_id, preprocess=None):
        self.pipeline = pipeline
        self.id = target_id
        self.preprocess = preprocess

    def predict(self, x):
        if self.preprocess is not None:
            x = self.preprocess(x)
        return glance_focus.predict_labels(self.pipeline, x)

    def correct(self, x, labels):
        return self.predict(x) == labels


class FalconTarget:
    def __init__(self, pipeline, target_id, mode="top"):
        self.pipeline = pipeline
        self.id = target_id
        self.mode = mode

    def correct(self, x, labels):
        _, ok = falcon.predict_labels(self.pipeline, x, mode=self.mode, truths=labels)
        return ok

    def predict(self, x):
        labels, _ = falcon.predict_labels(self.pipeline, x, mode="top",
                                          truths=np.zeros(x.shape[0], dtype=int))
        return labels


# ---------------------------------------------------------------------------
# reports

@dataclass
class TransferReport:
    rows: list = field(default_factory=list)      # dicts, one per (surrogate, attack, target)
    logs: dict = field(default_factory=dict)      # (surrogate, attack, target) -> per-image lines
    adv_sha: dict = field(default_factory=dict)   # (surrogate, attack) -> hash fed to all targets

    CSV_COLUMNS = ("surrogate", "attack", "target", "setting", "resolution",
                   "N", "clean_acc", "adv_acc", "precision")

    def add(self, **row):
        for k in ("clean_acc", "adv_acc"):
            if row.get(k) is not None:
                assert 0.0 <= row[k] <= 1.0, f"{k} out of range: {row[k]}"
        self.rows.append(row)

    def to_csv(self, config_hash=""):
        lines = [f"# config={config_hash}", ",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(c)) for c in self.CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def row(self, **match):
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _sha(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()[:16]


def generate_adv(surrogate, surrogate_id, attack_cfg, images, labels, batch=50,
                 model_set=None):
    """Craft the full adversarial set in fixed-size batches with per-image
    RNG streams, so the result is independent of batching."""
    parts = []
    fooled = []
    for s in range(0, images.shape[0], batch):
        xb, yb = images[s:s + batch], labels[s:s + batch]
        if model_set:
            b = attacks.lgv_attack(model_set, surrogate, xb, yb, attack_cfg,
                                   surrogate_id=surrogate_id)
        else:
            b = attacks.run_attack(surrogate, xb, yb, attack_cfg,
                                   surrogate_id=surrogate_id, index_offset=s)
        parts.append(b.adv)
        fooled.append(b.fooled_surrogate)
    adv = np.concatenate(parts)
    return attacks.AdvBatch(clean=images, adv=adv, labels=labels,
                            surrogate_id=surrogate_id, attack=attack_cfg,
                            fooled_surrogate=np.concatenate(fooled))


def transfer_eval(surrogate, surrogate_id, attack_cfg, targets, images, labels,
                  setting="", resolution="", model_set=None, adv=None):
    """Evaluate every target on one shared adversarial set.

    adv can carry a precomputed AdvBatch (settings reuse); otherwise it is
    generated here. Returns a TransferReport with one row per target.
    """
    labels = np.asarray(labels)
    if adv is None:
        adv = generate_adv(surrogate, surrogate_id, attack_cfg, images, labels,
                           model_set=model_set)
    adv.check_invariants()
    report = TransferReport()
    report.adv_sha[(surrogate_id, attack_cfg.kind)] = _sha(adv.adv)
    for t in targets:
        _eval_pair(report, t, adv.clean, adv.adv, labels,
                   surrogate=surrogate_id, attack=attack_cfg.kind,
                   setting=setting, resolution=resolution)
    return report


def _eval_pair(report, target, x_clean, x_adv, labels, surrogate, attack,
               setting, resolution):
    clean_ok = target.correct(x_clean, labels)
    adv_ok = target.correct(x_adv, labels)
    n = len(labels)
    report.logs[(surrogate, attack, target.id, setting)] = [
        f"{i} {int(labels[i])} {int(clean_ok[i])} {int(adv_ok[i])}" for i in range(n)
    ]
    report.add(surrogate=surrogate, attack=attack, target=target.id,
               setting=setting, resolution=resolution, N=n,
               clean_acc=float(clean_ok.mean()), adv_acc=float(adv_ok.mean()),
               precision=None)


def accuracy_from_log(lines, column):
    """Re-derive an accuracy from a persisted per-image log; column is
    'clean' or 'adv'."""
    col = 2 if column == "clean" else 3
    vals = [int(line.split()[col]) for line in lines]
    return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# downsampling settings

def _resample(x, h, w):
    return nn.bilinear_resize(x, h, w)


def down_up(x, low_res, full_res):
    """Downsample to low_res and back: the information loss a full-res
    model sees when fed 'downsampled' inputs."""
    return _resample(_resample(x, low_res[0], low_res[1]), full_res[0], full_res[1])


def run_setting(setting_id, env, attack_cfg, images, labels):
    """Run one downsampling setting.

    env is a dict with:
        surrogate_full / surrogate_low : attack surrogates (full & low res)
        passive_full / passive_low     : passive targets at each resolution
        gfnet                          : glance-focus pipeline (full-res input)
        low_res, full_res              : (h, w) pairs
    Setting 1: clean images, downsampled presentation.
    Setting 2: attack at full resolution, downsample before inference.
    Setting 3: downsample first, attack with a low-res-native surrogate.
    """
    labels = np.asarray(labels)
    low, full = env["low_res"], env["full_res"]
    report = TransferReport()
    res_tag = f"{low[0]}x{low[1]}"
    gf_target = GlanceFocusTarget(env["gfnet"], "glance_focus",
                                  preprocess=None)

    if setting_id == 1:
        x_low = _resample(images, *low)
        x_lowup = _resample(x_low, *full)
        _eval_pair(report, PassiveTarget(env["passive_full"], "passive_full"),
                   x_lowup, x_lowup, labels, surrogate="", attack="none",
                   setting=1, resolution=res_tag)
        _eval_pair(report, PassiveTarget(env["passive_low"], "passive_low"),
                   x_low, x_low, labels, surrogate="", attack="none",
                   setting=1, resolution=res_tag)
        _eval_pair(report, gf_target, x_lowup, x_lowup, labels,
                   surrogate="", attack="none", setting=1, resolution=res_tag)
        return report

    if setting_id == 2:
        adv = generate_adv(env["surrogate_full"], "surrogate_full", attack_cfg, images, labels)
        report.adv_sha[("surrogate_full", attack_cfg.kind)] = _sha(adv.adv)
        # full-res adversarial inference (the no-downsampling baseline)
        _eval_pair(report, PassiveTarget(env["passive_full"], "passive_full"),
                   adv.clean, adv.adv, labels, surrogate="surrogate_full",
                   attack=attack_cfg.kind, setting=2,
                   resolution=f"{full[0]}x{full[1]}")
        adv_low = _resample(adv.adv, *low)
        clean_low = _resample(adv.clean, *low)
        _eval_pair(report, PassiveTarget(env["passive_low"], "passive_low"),
                   clean_low, adv_low, labels, surrogate="surrogate_full",
                   attack=attack_cfg.kind, setting=2, resolution=res_tag)
        _eval_pair(report, gf_target, adv.clean, adv.adv, labels,
                   surrogate="surrogate_full", attack=attack_cfg.kind,
                   setting=2, resolution=res_tag)
        return report

    if setting_id == 3:
        x_low = _resample(images, *low)
        adv = generate_adv(env["surrogate_low"], "surrogate_low", attack_cfg, x_low, labels)
        report.adv_sha[("surrogate_low", attack_cfg.kind)] = _sha(adv.adv)
        _eval_pair(report, PassiveTarget(env["passive_low"], "passive_low"),
                   adv.clean, adv.adv, labels, surrogate="surrogate_low",
                   attack=attack_cfg.kind, setting=3, resolution=res_tag)
        adv_up = _resample(adv.adv, *full)
        clean_up = _resample(adv.clean, *full)
        _eval_pair(report, gf_target, clean_up, adv_up, labels,
                   surrogate="surrogate_low", attack=attack_cfg.kind,
                   setting=3, resolution=res_tag)
        return report

    raise ValueError(f"unknown setting {setting_id}")


# ---------------------------------------------------------------------------
# fixation precision

def precision_stats(ifpms):
    """Aggregate correct/potential over fixation maps. Precision is absent
    (None), not zero, when there are no potential points."""
    correct_total = sum(m.count(vizmaps.CORRECT) for m in ifpms)
    potential_total = sum(m.potential for m in ifpms)
    precision = correct_total / potential_total if potential_total > 0 else None
    return {"correct_total": correct_total, "potential_total": potential_total,
            "precision": precision}
