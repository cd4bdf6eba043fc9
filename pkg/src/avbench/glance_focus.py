"""Sequential glance-then-focus classifier.

Step 1 classifies the whole image downsampled to the working resolution
(the glance); steps 2..T classify native-resolution patches cropped
around centers proposed by a recurrent policy. A gated recurrent head
aggregates features across steps into a per-step class distribution.
Robustness evaluations run with early exit disabled and report the
final-step label.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nn, zoo
from .errors import DivergenceError, ShapeError


@dataclass
class SequencePrediction:
    probs: np.ndarray          # (T, num_classes), rows sum to 1
    centers: np.ndarray        # (T, 2) normalized proposed centers, row t feeds step t+1
    halted_at: int | None
    final_label: int


@dataclass
class GlanceFocusPipeline:
    global_encoder: nn.Model
    local_encoder: nn.Model
    recurrent_head: nn.Model    # gru-cell + dense class head
    proposer: nn.Model          # gru-cell + dense grid head
    steps: int = 4
    etas: tuple = ()            # per-step confidence thresholds; empty -> all 1.0
    patch_size: tuple = (48, 48)
    grid_k: int = 7
    early_exit: bool = False
    full_res: tuple = (128, 128)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.etas:
            self.etas = tuple(1.0 for _ in range(self.steps))
        if len(self.etas) != self.steps:
            raise ValueError("need one threshold per step")
        if tuple(self.patch_size) != tuple(self.local_encoder.input_shape[1:]):
            raise ShapeError("patch_size must equal the local encoder input resolution")

    @property
    def hidden(self):
        return self.recurrent_head.specs[0].hp["hidden"]

    @property
    def num_classes(self):
        return self.recurrent_head.specs[1].hp["out_dim"]


def grid_centers(k):
    """Normalized centers of a k x k proposal grid, row-major."""
    c = (np.arange(k) + 0.5) / k
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)  # (k*k, 2) as (y, x)


def crop_patch(x, centers, size):
    """Crop size patches centered at normalized coords, clamped inside.

    x: (N,C,H,W); centers: (N,2) as (y,x) in [0,1]. Returns (N,C,ph,pw).
    """
    n, c, h, w = x.shape
    ph, pw = size
    if ph > h or pw > w:
        raise ShapeError(f"patch {size} larger than image {h}x{w}")
    cy = np.clip(np.round(centers[:, 0] * h - ph / 2).astype(int), 0, h - ph)
    cx = np.clip(np.round(centers[:, 1] * w - pw / 2).astype(int), 0, w - pw)
    out = np.empty((n, c, ph, pw), dtype=x.dtype)
    for i in range(n):
        out[i] = x[i, :, cy[i]:cy[i] + ph, cx[i]:cx[i] + pw]
    return out


def _head_step(head: nn.Model, z, h):
    """One recurrent step: gru update then dense logits."""
    gp, dp = head.params
    hn, _ = nn.gru_forward(z, h, gp)
    logits, _ = nn.dense_forward(hn, dp["w"], dp["b"])
    return hn, logits


def propose(pipeline, h_pi, z, sample_rng=None):
    """Next fixation center from proposer state: argmax cell in eval mode,
    seeded categorical draw in train mode. Returns (h_pi, centers, cell, probs)."""
    h_pi, logits = _head_step(pipeline.proposer, z, h_pi)
    probs = nn.softmax(logits)
    if sample_rng is None:
        cell = probs.argmax(axis=1)
    else:
        u = sample_rng.uniform(size=probs.shape[0])
        cdf = probs.cumsum(axis=1)
        cell = (u[:, None] > cdf).sum(axis=1)
        cell = np.minimum(cell, probs.shape[1] - 1)
    centers = grid_centers(pipeline.grid_k)[cell]
    return h_pi, centers, cell, probs


def infer_batch(pipeline, x, initial_state=None, forced_centers=None):
    """Run the sequence for a batch; returns per-step probs/centers/halts.

    initial_state=(h_c, h_pi, start_step) restarts from a saved state at
    a later step (used by the crop-dependence check); forced_centers
    overrides the proposer's centers.
    """
    n = x.shape[0]
    hdim = pipeline.hidden
    if initial_state is None:
        h_c = np.zeros((n, hdim), dtype=np.float32)
        h_pi = np.zeros((n, hdim), dtype=np.float32)
        t0 = 0
    else:
        h_c, h_pi, t0 = initial_state
    probs_seq = np.zeros((n, pipeline.steps, pipeline.num_classes), dtype=np.float32)
    centers_seq = np.zeros((n, pipeline.steps, 2), dtype=np.float32)
    centers = None
    ph, pw = pipeline.patch_size
    for t in range(t0, pipeline.steps):
        if t == 0:
            glimpse = nn.bilinear_resize(x, ph, pw)
            z = pipeline.global_encoder.forward(glimpse)
        else:
            if forced_centers is not None:
                centers = forced_centers[:, t - 1]
            patches = crop_patch(x, centers, (ph, pw))
            z = pipeline.local_encoder.forward(patches)
        h_c, logits = _head_step(pipeline.recurrent_head, z, h_c)
        probs_seq[:, t] = nn.softmax(logits)
        h_pi, centers, _, _ = propose(pipeline, h_pi, z)
        centers_seq[:, t] = centers
    return probs_seq, centers_seq, (h_c, h_pi)


def infer(pipeline, x):
    """Single-image inference -> SequencePrediction."""
    probs_seq, centers_seq, _ = infer_batch(pipeline, x[None] if x.ndim == 3 else x)
    probs = probs_seq[0]
    halted = None
    if pipeline.early_exit:
        conf = probs.max(axis=1)
        hits = np.nonzero(conf >= np.array(pipeline.etas))[0]
        if hits.size:
            halted = int(hits[0]) + 1
    label_step = (halted - 1) if halted is not None else pipeline.steps - 1
    return SequencePrediction(probs=probs, centers=centers_seq[0],
                              halted_at=halted,
                              final_label=int(probs[label_step].argmax()))


def predict_labels(pipeline, x, batch=64):
    """Final-step labels for a batch of full-resolution images."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], batch):
        probs_seq, _, _ = infer_batch(pipeline, x[s:s + batch])
        out[s:s + batch] = probs_seq[:, -1].argmax(axis=1)
    return out


def predict_probs(pipeline, x, batch=64):
    out = np.empty((x.shape[0], pipeline.num_classes), dtype=np.float32)
    for s in range(0, x.shape[0], batch):
        probs_seq, _, _ = infer_batch(pipeline, x[s:s + batch])
        out[s:s + batch] = probs_seq[:, -1]
    return out


# ---------------------------------------------------------------------------
# training

def build_pipeline(num_classes, full_res=(128, 128), patch_size=(48, 48),
                   steps=4, grid_k=7, hidden=128, seed=0, encoder_blocks=4):
    fg = zoo.build_model("encoder", num_classes, patch_size, seed=seed * 4 + 1, blocks=encoder_blocks)
    fl = zoo.build_model("encoder", num_classes, patch_size, seed=seed * 4 + 2, blocks=encoder_blocks)
    feat = fg.out_dim()
    head = zoo.build_recurrent("recurrent_head", feat, hidden, num_classes, seed=seed * 4 + 3)
    prop = zoo.build_recurrent("proposer", feat, hidden, grid_k * grid_k, seed=seed * 4 + 4)
    return GlanceFocusPipeline(global_encoder=fg, local_encoder=fl,
                               recurrent_head=head, proposer=prop,
                               steps=steps, patch_size=patch_size, grid_k=grid_k,
                               full_res=full_res)


def train_glance_focus(pipeline, images, labels, cfg: zoo.TrainConfig,
                       train_proposer=True):
    """Summed per-step CE on encoders + recurrent head; score-function
    updates on the proposer with reward = per-step gain in the true-class
    probability against a moving-average baseline."""
    n = images.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31]))
    models = [pipeline.global_encoder, pipeline.local_encoder,
              pipeline.recurrent_head, pipeline.proposer]
    vels = [nn.make_velocity(m.params) for m in models]
    baseline = 0.0
    history = []
    T = pipeline.steps
    ph, pw = pipeline.patch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            bs = len(idx)
            # ---- forward, caching everything needed for BPTT
            h_c = np.zeros((bs, pipeline.hidden), dtype=np.float32)
            h_pi = np.zeros_like(h_c)
            enc_caches, gru_c_caches, head_caches = [], [], []
            gru_pi_caches, pi_caches = [], []
            probs_all, pi_probs_all, cells_all = [], [], []
            z = None
            for t in range(T):
                if t == 0:
                    glimpse = nn.bilinear_resize(xb, ph, pw)
                    enc = pipeline.global_encoder
                else:
                    centers = grid_centers(pipeline.grid_k)[cells_all[-1]]
                    glimpse = crop_patch(xb, centers, (ph, pw))
                    enc = pipeline.local_encoder
                z, ec = enc.forward(glimpse, want_cache=True)
                enc_caches.append((enc, ec))
                gp, dp = pipeline.recurrent_head.params
                h_c_new, gc = nn.gru_forward(z, h_c, gp)
                logits, hc_cache = nn.dense_forward(h_c_new, dp["w"], dp["b"])
                probs_all.append(nn.softmax(logits))
                gru_c_caches.append(gc)
                head_caches.append(hc_cache)
                h_c = h_c_new
                gpp, dpp = pipeline.proposer.params
                h_pi_new, gpc = nn.gru_forward(z, h_pi, gpp)
                pil, pic = nn.dense_forward(h_pi_new, dpp["w"], dpp["b"])
                pi_probs = nn.softmax(pil)
                u = rng.uniform(size=bs)
                cdf = pi_probs.cumsum(axis=1)
                cells = np.minimum((u[:, None] > cdf).sum(axis=1), pi_probs.shape[1] - 1)
                gru_pi_caches.append(gpc)
                pi_caches.append(pic)
                pi_probs_all.append(pi_probs)
                cells_all.append(cells)
                h_pi = h_pi_new

            ce = float(np.mean([nn.cross_entropy(p, yb) for p in probs_all]))
            if not np.isfinite(ce):
                raise DivergenceError(f"NaN loss at epoch {epoch}, batch {start // cfg.batch_size}")
            losses.append(ce)

            # ---- classification path backward (BPTT over the gated head)
            g_fg = [dict() for _ in pipeline.global_encoder.specs]
            g_fl = [dict() for _ in pipeline.local_encoder.specs]
            g_head = [dict() for _ in pipeline.recurrent_head.params]
            g_prop = [dict() for _ in pipeline.proposer.params]
            ar = np.arange(bs)
            rewards = [probs_all[t][ar, yb] - probs_all[t - 1][ar, yb] for t in range(1, T)]
            dh_c = np.zeros_like(h_c)
            dh_pi = np.zeros_like(h_pi)
            gp, dp = pipeline.recurrent_head.params
            gpp, dpp = pipeline.proposer.params
            for t in range(T - 1, -1, -1):
                dlogits = probs_all[t].copy()
                dlogits[ar, yb] -= 1.0
                dlogits /= bs * T   # the loss is the mean per-step CE
                dh_from_head, gdense = nn.dense_backward(dlogits, dp["w"], head_caches[t])
                _acc(g_head, 1, gdense)
                dz, dh_c, ggru = nn.gru_backward(dh_from_head + dh_c, gp, gru_c_caches[t])
                _acc(g_head, 0, ggru)
                # proposer path: policy-gradient on the cell sampled at step t,
                # rewarded by the step t+1 confidence gain
                if train_proposer and t < T - 1:
                    adv = (rewards[t] - baseline).astype(np.float32)
                    dpil = pi_probs_all[t].copy()
                    dpil[ar, cells_all[t]] -= 1.0
                    dpil *= adv[:, None] / bs
                else:
                    dpil = np.zeros_like(pi_probs_all[t])
                dh_from_pi, gpdense = nn.dense_backward(dpil, dpp["w"], pi_caches[t])
                _acc(g_prop, 1, gpdense)
                dz_pi, dh_pi, gpgru = nn.gru_backward(dh_from_pi + dh_pi, gpp, gru_pi_caches[t])
                _acc(g_prop, 0, gpgru)
                # encoder gradient: classification signal only (the policy
                # gradient is stopped at z to keep encoder training on-task)
                enc, ec = enc_caches[t]
                genc, _ = enc.backward_from(dz, ec)
                _acc_list(g_fg if enc is pipeline.global_encoder else g_fl, genc)
            if rewards:
                baseline = 0.9 * baseline + 0.1 * float(np.mean([r.mean() for r in rewards]))

            for m, g, v in zip(models, [g_fg, g_fl, g_head, g_prop], vels):
                g = [gi if gi else {} for gi in g]
                nn.sgd_step(m.params, [_or_zeros(gi, pi) for gi, pi in zip(g, m.params)],
                            v, lr, cfg.momentum)
        history.append(float(np.mean(losses)))
    return pipeline, history


def _acc(glist, i, g):
    for k, v in g.items():
        glist[i][k] = glist[i].get(k, 0) + v


def _acc_list(glist, gs):
    for i, g in enumerate(gs):
        for k, v in g.items():
            glist[i][k] = glist[i].get(k, 0) + v


def _or_zeros(g, p):
    return g if g else {k: np.zeros_like(v) for k, v in p.items()}


# ---------------------------------------------------------------------------
# persistence: bundle of role-tagged weight files + text manifest

def save_pipeline(dirpath, pipeline):
    os.makedirs(dirpath, exist_ok=True)
    nn.save_model(os.path.join(dirpath, "global_encoder.avnw"), pipeline.global_encoder, "encoder")
    nn.save_model(os.path.join(dirpath, "local_encoder.avnw"), pipeline.local_encoder, "encoder")
    nn.save_model(os.path.join(dirpath, "recurrent_head.avnw"), pipeline.recurrent_head, "recurrent_head")
    nn.save_model(os.path.join(dirpath, "proposer.avnw"), pipeline.proposer, "proposer")
    with open(os.path.join(dirpath, "pipeline.txt"), "w") as f:
        f.write("kind=glance_focus\n")
        f.write(f"steps={pipeline.steps}\n")
        f.write("etas=" + ",".join(repr(e) for e in pipeline.etas) + "\n")
        f.write(f"patch_size={pipeline.patch_size[0]},{pipeline.patch_size[1]}\n")
        f.write(f"grid_k={pipeline.grid_k}\n")
        f.write(f"full_res={pipeline.full_res[0]},{pipeline.full_res[1]}\n")
        f.write(f"early_exit={int(pipeline.early_exit)}\n")


def load_pipeline(dirpath):
    kv = {}
    with open(os.path.join(dirpath, "pipeline.txt")) as f:
        for line in f:
            k, v = line.strip().split("=", 1)
            kv[k] = v
    fg, _ = nn.load_model(os.path.join(dirpath, "global_encoder.avnw"), expect_role="encoder")
    fl, _ = nn.load_model(os.path.join(dirpath, "local_encoder.avnw"), expect_role="encoder")
    head, _ = nn.load_model(os.path.join(dirpath, "recurrent_head.avnw"), expect_role="recurrent_head")
    prop, _ = nn.load_model(os.path.join(dirpath, "proposer.avnw"), expect_role="proposer")
    return GlanceFocusPipeline(
        global_encoder=fg, local_encoder=fl, recurrent_head=head, proposer=prop,
        steps=int(kv["steps"]),
        etas=tuple(float(e) for e in kv["etas"].split(",")),
        patch_size=tuple(int(v) for v in kv["patch_size"].split(",")),
        grid_k=int(kv["grid_k"]),
        full_res=tuple(int(v) for v in kv["full_res"].split(",")),
        early_exit=bool(int(kv["early_exit"])))
