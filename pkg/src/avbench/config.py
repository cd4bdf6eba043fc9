"""Plain-text run configuration: [section] headers and key=value lines.

Unknown sections or keys are rejected; serialization is canonical
(sorted sections and keys) so parse(serialize(c)) == c and the config
hash is stable.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError

# section -> key -> default (the default's type is the key's type)
SCHEMA = {
    "run": {"seed": 42, "out": "out", "jobs": 1},
    "data": {
        "num_classes": 10, "per_class": 250, "test_per_class": 50,
        "full_h": 128, "full_w": 128, "low_h": 48, "low_w": 48,
        "clutter": 0.5, "multi_fraction": 0.0,
    },
    "train": {
        "epochs": 6, "lr": 0.05, "momentum": 0.9, "batch_size": 32,
        "lr_decay_epochs": 3,
        "surrogate_epochs": 8, "surrogate_lr": 0.1,
        "gfnet_epochs": 12, "gfnet_lr": 0.05, "gfnet_lr_decay": 4,
        "falcon_epochs": 4, "falcon_lr": 0.05,
    },
    "attack": {
        "kind": "pgd", "epsilon": 8 / 255, "alpha": 2 / 255, "steps": 10,
        "mu": 1.0, "vmi_neighbors": 5, "vmi_beta": 1.5,
        "pifgsm_amp": 2.5, "pifgsm_kernel": 3, "random_start": True,
    },
    "gfnet": {"steps": 4, "grid_k": 7, "hidden": 128, "patch": 48},
    "falcon": {
        "init_size": 21, "step_px": 8, "steps": 6, "threshold": 0.5,
        "grid": 7, "nms_iou": 0.45,
    },
    "eval": {"setting": 2, "mode": "top", "subset": 0},
    "lgv": {"lr_high": 0.05, "epochs": 2, "snapshots_per_epoch": 4,
            "batch_size": 32},
}


class RunConfig:
    def __init__(self, values=None):
        self.values = {s: dict(d) for s, d in SCHEMA.items()}
        if values:
            for s, d in values.items():
                for k, v in d.items():
                    self.set(s, k, v)

    def get(self, section, key):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key [{section}] {key}")

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = _coerce(SCHEMA[section][key], value, section, key)

    def serialize(self):
        lines = []
        for s in sorted(self.values):
            lines.append(f"[{s}]")
            for k in sorted(self.values[s]):
                lines.append(f"{k}={_fmt(self.values[s][k])}")
        return "\n".join(lines) + "\n"

    def hash(self):
        # out and jobs never influence results, so they stay out of the
        # hash: the same experiment in two directories is the same run
        lines = []
        for s in sorted(self.values):
            lines.append(f"[{s}]")
            for k in sorted(self.values[s]):
                if s == "run" and k in ("out", "jobs"):
                    continue
                lines.append(f"{k}={_fmt(self.values[s][k])}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    # convenience views -----------------------------------------------------

    def full_res(self):
        return (self.get("data", "full_h"), self.get("data", "full_w"))

    def low_res(self):
        return (self.get("data", "low_h"), self.get("data", "low_w"))

    def attack_config(self, seed=None, **overrides):
        from .attacks import AttackConfig
        kv = dict(self.values["attack"])
        kv.update({k: v for k, v in overrides.items() if v is not None})
        return AttackConfig(seed=self.get("run", "seed") if seed is None else seed, **kv)


def _coerce(default, value, section, key):
    if isinstance(value, str):
        try:
            if isinstance(default, bool):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            return value
        except ValueError:
            raise ConfigError(f"bad value for [{section}] {key}: {value!r}")
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"bad type for [{section}] {key}: {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"bad type for [{section}] {key}: {value!r}")
    return value


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse(text):
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        k, v = (t.strip() for t in line.split("=", 1))
        cfg.set(section, k, v)
    return cfg


def load(path):
    try:
        with open(path) as f:
            return parse(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
