"""L-infinity gradient-sign attack suite plus the checkpoint-set wrapper.

All attacks share one iterative engine so the definitional reductions
(variance-tuned -> momentum -> basic iterative -> identity) hold
bit-exactly. Images live in [0,1]; every output is projected into the
epsilon ball around the clean input and clipped to pixel range.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import DivergenceError, FormatError, ShapeError

ATTACK_KINDS = ("fgsm", "bim", "pgd", "mifgsm", "vmifgsm", "pifgsm")


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    mu: float = 1.0
    vmi_neighbors: int = 5
    vmi_beta: float = 1.5
    pifgsm_amp: float = 2.5
    pifgsm_kernel: int = 3
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("epsilon, alpha and steps must be >= 0")
        if self.pifgsm_kernel < 1 or self.pifgsm_kernel % 2 == 0:
            raise ValueError("pifgsm kernel must be odd and >= 1")
        if self.vmi_neighbors < 0:
            raise ValueError("vmi_neighbors must be >= 0")

    def canonical_text(self):
        fields = ("kind", "epsilon", "alpha", "steps", "mu", "vmi_neighbors",
                  "vmi_beta", "pifgsm_amp", "pifgsm_kernel", "random_start", "seed")
        return "\n".join(f"{k}={getattr(self, k)!r}" for k in fields)


@dataclass
class AdvBatch:
    clean: np.ndarray
    adv: np.ndarray
    labels: np.ndarray
    surrogate_id: str
    attack: AttackConfig
    fooled_surrogate: np.ndarray  # bool per image

    def check_invariants(self):
        eps = self.attack.epsilon
        linf = np.abs(self.adv - self.clean).reshape(self.adv.shape[0], -1).max(axis=1)
        assert np.all(linf <= eps + 1e-6), f"epsilon ball violated: {linf.max()} > {eps}"
        assert self.adv.min() >= 0.0 and self.adv.max() <= 1.0, "pixel range violated"


def _l1_normalize(g):
    n = np.abs(g).reshape(g.shape[0], -1).sum(axis=1)
    n = np.maximum(n, 1e-12).astype(g.dtype)
    return g / n[:, None, None, None]


def _project_kernel(width, dtype):
    """Uniform neighbor kernel with zero center; width 1 degenerates to
    an all-zero kernel (no neighbors), reducing the attack to its base."""
    k = np.ones((width, width), dtype=dtype)
    k[width // 2, width // 2] = 0.0
    s = k.sum()
    if s > 0:
        k /= s
    return k


def _depthwise_conv_same(x, kernel):
    kw = kernel.shape[0]
    pad = kw // 2
    if pad == 0:
        return x * kernel[0, 0]
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(x)
    for ki in range(kw):
        for kj in range(kw):
            kv = kernel[ki, kj]
            if kv != 0.0:
                out += kv * xp[:, :, ki:ki + h, kj:kj + w]
    return out


def _grad(model_for_step, x, y):
    g = nn.input_grad(model_for_step, x, y)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("NaN gradient during attack")
    return g


def run_attack(surrogate, x, y, cfg: AttackConfig, surrogate_id="surrogate",
               model_picker=None, index_offset=0):
    """Generate an AdvBatch from a surrogate with a CE loss head.

    model_picker, when given, maps a step index to the model whose
    gradient is used at that step (the checkpoint-set attack draws a
    random snapshot per step); the base surrogate still scores
    fooled_surrogate. index_offset is the absolute index of x[0] in the
    full evaluation set: every random draw is keyed per image on
    (cfg.seed, absolute index), so results are independent of how the
    set is split into batches.
    """
    if surrogate.head_kind != "softmax-ce-head":
        raise ShapeError("attack surrogate must carry a softmax-ce-head")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("clean images must lie in [0,1]")
    x = x.astype(np.float32)
    eps = np.float32(cfg.epsilon)
    adv = x.copy()
    pick = model_picker if model_picker is not None else (lambda step: surrogate)

    if cfg.kind == "fgsm":
        if eps > 0:
            g = _grad(pick(0), adv, y)
            adv = np.clip(adv + eps * np.sign(g), 0.0, 1.0)
            adv = np.clip(adv, x - eps, x + eps)
        return _finish(surrogate, x, adv.astype(np.float32), y, cfg, surrogate_id)

    alpha = np.float32(cfg.alpha)
    if cfg.kind == "pgd" and cfg.random_start and eps > 0:
        noise = np.stack([
            np.random.default_rng(np.random.SeedSequence([cfg.seed, index_offset + i]))
            .uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:])
            for i in range(x.shape[0])
        ]).astype(np.float32)
        adv = np.clip(x + noise, 0.0, 1.0)

    momentum_based = cfg.kind in ("mifgsm", "vmifgsm")
    g_acc = np.zeros_like(x)
    variance = np.zeros_like(x)
    amp = np.float32(cfg.pifgsm_amp if cfg.kind == "pifgsm" else 1.0)
    proj_kernel = _project_kernel(cfg.pifgsm_kernel, x.dtype) if cfg.kind == "pifgsm" else None
    overshoot = np.zeros_like(x)  # accumulated amplification budget (patchwise attack)

    for step in range(cfg.steps):
        model = pick(step)
        grad = _grad(model, adv, y)
        if momentum_based:
            g_acc = cfg.mu * g_acc + _l1_normalize(grad + variance)
            if cfg.kind == "vmifgsm" and cfg.vmi_neighbors > 0:
                span = cfg.vmi_beta * cfg.epsilon
                noise = np.stack([
                    np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, 101, step, index_offset + i]))
                    .uniform(-span, span, size=(cfg.vmi_neighbors,) + adv.shape[1:])
                    for i in range(adv.shape[0])
                ]).astype(np.float32)  # (N, neighbors, C, H, W)
                nb_sum = np.zeros_like(grad)
                for j in range(cfg.vmi_neighbors):
                    nb = np.clip(adv + noise[:, j], 0.0, 1.0)
                    nb_sum += _grad(model, nb, y)
                variance = nb_sum / cfg.vmi_neighbors - grad
            direction = np.sign(g_acc)
        else:
            direction = np.sign(grad)

        if cfg.kind == "pifgsm":
            overshoot = overshoot + amp * alpha * direction
            cut = np.clip(np.abs(overshoot) - eps, 0.0, None) * np.sign(overshoot)
            adv = adv + amp * alpha * direction + _depthwise_conv_same(cut, proj_kernel)
        else:
            adv = adv + alpha * direction
        adv = np.clip(np.clip(adv, x - eps, x + eps), 0.0, 1.0)

    return _finish(surrogate, x, adv.astype(np.float32), y, cfg, surrogate_id)


def _finish(surrogate, x, adv, y, cfg, surrogate_id):
    preds = surrogate.predict_probs(adv).argmax(axis=1)
    batch = AdvBatch(clean=x, adv=adv, labels=np.asarray(y), surrogate_id=surrogate_id,
                     attack=cfg, fooled_surrogate=preds != np.asarray(y))
    batch.check_invariants()
    return batch


def fgsm(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="fgsm"))


def bim(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="pgd", random_start=False))


def pgd(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="pgd"))


def mifgsm(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="mifgsm"))


def vmifgsm(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="vmifgsm"))


def pifgsm(surrogate, x, y, cfg):
    return run_attack(surrogate, x, y, replace(cfg, kind="pifgsm"))


# ---------------------------------------------------------------------------
# checkpoint-set (weight-geometry) attack

def lgv_collect(surrogate, images, labels, lr_high=0.05, epochs=2,
                snapshots_per_epoch=4, batch_size=32, momentum=0.9, seed=0):
    """Collect weight snapshots along a constant-high-LR SGD trajectory."""
    if snapshots_per_epoch <= 0 or epochs <= 0:
        return []
    model = nn.Model(surrogate.specs,
                     [{k: v.copy() for k, v in p.items()} for p in surrogate.params],
                     surrogate.input_shape)
    n = images.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    vel = nn.make_velocity(model.params)
    snapshots = []
    loss0 = None
    for epoch in range(epochs):
        order = rng.permutation(n)
        nbatches = max(n // batch_size, 1)
        marks = {round((j + 1) * nbatches / snapshots_per_epoch) - 1
                 for j in range(snapshots_per_epoch)}
        for b, start in enumerate(range(0, nbatches * batch_size, batch_size)):
            idx = order[start:start + batch_size]
            loss, grads, _ = nn.loss_and_grads(model, images[idx], labels[idx])
            if loss0 is None:
                loss0 = max(loss, 1e-3)
            if not np.isfinite(loss) or loss > 10 * max(loss0, 1.0):
                raise DivergenceError(f"checkpoint collection diverged at epoch {epoch}, loss {loss:.3f}")
            nn.sgd_step(model.params, grads, vel, lr_high, momentum)
            if b in marks:
                snapshots.append(nn.Model(
                    model.specs,
                    [{k: v.copy() for k, v in p.items()} for p in model.params],
                    model.input_shape))
    return snapshots


def lgv_attack(model_set, surrogate, x, y, base_cfg: AttackConfig, surrogate_id="lgv"):
    """Base iterative attack where each step uses a random snapshot's gradient."""
    if not model_set:
        return run_attack(surrogate, x, y, base_cfg, surrogate_id=surrogate_id)
    res = {m.input_shape for m in model_set}
    if len(res) != 1 or model_set[0].input_shape != surrogate.input_shape:
        raise ShapeError(f"mixed-resolution snapshot set: {sorted(res)}")
    rng = np.random.default_rng(np.random.SeedSequence([base_cfg.seed, 77]))
    picks = rng.integers(0, len(model_set), size=max(base_cfg.steps, 1))
    return run_attack(surrogate, x, y, base_cfg, surrogate_id=surrogate_id,
                      model_picker=lambda step: model_set[picks[step]])


# ---------------------------------------------------------------------------
# AdvBatch persistence: config header, manifest, raw float32 planes

def save_batch(path, batch: AdvBatch):
    with open(path, "wb") as f:
        header = io.StringIO()
        header.write("AVADV 1\n")
        header.write(f"surrogate={batch.surrogate_id}\n")
        header.write(batch.attack.canonical_text() + "\n")
        shape = ",".join(map(str, batch.clean.shape))
        header.write(f"shape={shape}\n")
        for i in range(batch.clean.shape[0]):
            header.write(f"img {i} {int(batch.labels[i])} {int(batch.fooled_surrogate[i])}\n")
        header.write("END\n")
        f.write(header.getvalue().encode("utf-8"))
        f.write(batch.clean.astype("<f4").tobytes())
        f.write(batch.adv.astype("<f4").tobytes())


def load_batch(path):
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"END\n")
    if not raw.startswith(b"AVADV 1\n") or end < 0:
        raise FormatError(f"{path}: not an adversarial batch file")
    lines = raw[:end].decode("utf-8").splitlines()[1:]
    meta, labels, fooled = {}, [], []
    for line in lines:
        if line.startswith("img "):
            _, _, lab, fl = line.split()
            labels.append(int(lab))
            fooled.append(bool(int(fl)))
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    shape = tuple(int(t) for t in meta["shape"].split(","))
    count = int(np.prod(shape))
    body = raw[end + 4:]
    if len(body) != 2 * 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    clean = np.frombuffer(body[:4 * count], dtype="<f4").reshape(shape).copy()
    adv = np.frombuffer(body[4 * count:], dtype="<f4").reshape(shape).copy()
    cfg = AttackConfig(**{
        k: (v == "True" if k == "random_start" else
            int(v) if k in ("steps", "vmi_neighbors", "pifgsm_kernel", "seed") else
            v.strip("'") if k == "kind" else float(v))
        for k, v in (line.split("=", 1) for line in lines
                     if "=" in line and not line.startswith(("surrogate", "shape")))
    })
    return AdvBatch(clean=clean, adv=adv, labels=np.array(labels),
                    surrogate_id=meta["surrogate"], attack=cfg,
                    fooled_surrogate=np.array(fooled))
