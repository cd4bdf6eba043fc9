"""Fixation-grid localization pipeline.

A localizer scans a grid of initial fixation points. From each point it
grows a glimpse through four directional expansion actions, or abandons
the point via a switch action. Final glimpses are labeled by a frozen
full-resolution classifier, deduplicated by NMS, and reported in
top / any / multi prediction modes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nn, zoo
from .errors import DivergenceError, ShapeError

STOP = "stop"
SWITCH = "switch"


@dataclass
class Glimpse:
    x0: int
    y0: int
    x1: int
    y1: int
    origin_fixation: int = -1

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ShapeError(f"degenerate glimpse {(self.x0, self.y0, self.x1, self.y1)}")

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class Candidate:
    box: Glimpse
    class_label: int
    confidence: float


@dataclass
class LocalizeConfig:
    init_size: int = 21       # initial glimpse side, pixels (image/6 for 128)
    step_px: int = 8          # expansion per side per step (image/16 for 128)
    steps: int = 6
    threshold: float = 0.5
    grid: int = 7
    glimpse_res: tuple = (48, 48)
    nms_iou: float = 0.45


def grid_points(h, w, g):
    """g*g cell centers (x, y), row-major, evenly spaced."""
    if g < 1:
        raise ValueError("grid must be >= 1")
    cy = ((np.arange(g) + 0.5) * h / g)
    cx = ((np.arange(g) + 0.5) * w / g)
    pts = [(float(cx[j]), float(cy[i])) for i in range(g) for j in range(g)]
    return pts


def expansion_targets(glimpse, pseudo_box):
    """Per-direction binary targets: 1 while the glimpse edge has not
    reached the box edge on that side. Order: (dx+, dx-, dy+, dy-)."""
    gx0, gy0, gx1, gy1 = _astuple(glimpse)
    bx0, by0, bx1, by1 = _astuple(pseudo_box)
    return (int(gx1 < bx1), int(gx0 > bx0), int(gy1 < by1), int(gy0 > by0))


def switch_target(fixation, pseudo_box):
    """True when the fixation point falls outside the box (closed box:
    boundary points count as inside)."""
    fx, fy = fixation
    bx0, by0, bx1, by1 = _astuple(pseudo_box)
    return not (bx0 <= fx <= bx1 and by0 <= fy <= by1)


def _astuple(b):
    return b.as_tuple() if isinstance(b, Glimpse) else tuple(b)


def expand_step(glimpse, actions, step_px, h, w, threshold=0.5):
    """Apply one action vector: returns (new_glimpse | glimpse, verdict)
    where verdict is None (grew), STOP, or SWITCH.

    actions: (dx+, dx-, dy+, dy-, switch) probabilities.
    """
    if step_px < 1:
        raise ValueError("step_px must be >= 1")
    dxp, dxm, dyp, dym, sw = actions
    if sw >= threshold:
        return glimpse, SWITCH
    x0, y0, x1, y1 = glimpse.as_tuple()
    nx1 = min(x1 + step_px, w) if dxp >= threshold else x1
    nx0 = max(x0 - step_px, 0) if dxm >= threshold else x0
    ny1 = min(y1 + step_px, h) if dyp >= threshold else y1
    ny0 = max(y0 - step_px, 0) if dym >= threshold else y0
    if (nx0, ny0, nx1, ny1) == (x0, y0, x1, y1):
        return glimpse, STOP
    return Glimpse(nx0, ny0, nx1, ny1, glimpse.origin_fixation), None


def initial_glimpse(fixation, init_size, h, w, origin=-1):
    fx, fy = fixation
    half = init_size / 2
    x0 = int(round(min(max(fx - half, 0), w - init_size)))
    y0 = int(round(min(max(fy - half, 0), h - init_size)))
    return Glimpse(x0, y0, x0 + init_size, y0 + init_size, origin)


def crop_resize(x, glimpse, out_hw):
    """Crop one box from a CHW image and resize to the working resolution."""
    sub = x[:, glimpse.y0:glimpse.y1, glimpse.x0:glimpse.x1]
    return nn.bilinear_resize(sub[None], out_hw[0], out_hw[1])[0]


def localize_from(localizer, x, fixation, cfg: LocalizeConfig, origin=-1):
    """Grow a glimpse from one fixation; final glimpse on STOP (or step
    budget exhaustion), None if any step chose SWITCH."""
    boxes = localize_batch(localizer, x, [fixation], cfg, origins=[origin])
    return boxes[0]


def localize_batch(localizer, x, fixations, cfg: LocalizeConfig, origins=None):
    """Run all fixation trajectories in lockstep, batching the localizer
    forward passes. Returns a list of final Glimpse or None per fixation."""
    _, h, w = x.shape
    if origins is None:
        origins = list(range(len(fixations)))
    glimpses = [initial_glimpse(f, cfg.init_size, h, w, o) for f, o in zip(fixations, origins)]
    state = ["active"] * len(fixations)
    for _ in range(cfg.steps):
        live = [i for i, s in enumerate(state) if s == "active"]
        if not live:
            break
        batch = np.stack([crop_resize(x, glimpses[i], cfg.glimpse_res) for i in live])
        acts = localizer.predict_probs(batch)
        for bi, i in enumerate(live):
            g, verdict = expand_step(glimpses[i], acts[bi], cfg.step_px, h, w, cfg.threshold)
            glimpses[i] = g
            if verdict == SWITCH:
                state[i] = "switched"
            elif verdict == STOP:
                state[i] = "stopped"
    return [None if state[i] == "switched" else glimpses[i] for i in range(len(fixations))]


def iou(a, b):
    ax0, ay0, ax1, ay1 = _astuple(a)
    bx0, by0, bx1, by1 = _astuple(b)
    ix = max(0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def nms(candidates, iou_threshold):
    """Greedy confidence-descending suppression; deterministic tie-break
    by higher confidence then lower origin fixation index."""
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].confidence, candidates[i].box.origin_fixation))
    kept = []
    for i in order:
        c = candidates[i]
        if all(iou(c.box, k.box) < iou_threshold for k in kept):
            kept.append(c)
    return kept


@dataclass
class FalconPipeline:
    localizer: nn.Model
    classifier: nn.Model       # frozen full-resolution classifier
    cfg: LocalizeConfig = field(default_factory=LocalizeConfig)

    def classify_glimpse(self, x, glimpses):
        """Crop each glimpse from the full-res image, resize to the
        classifier's native resolution, and return (labels, confidences)."""
        ch, cw = self.classifier.input_shape[1:]
        batch = np.stack([
            nn.bilinear_resize(x[:, g.y0:g.y1, g.x0:g.x1][None], ch, cw)[0]
            for g in glimpses])
        probs = self.classifier.predict_probs(batch)
        return probs.argmax(axis=1), probs.max(axis=1)


def collect_candidates(pipeline, x):
    """All NMS survivors for one CHW image, plus the raw per-fixation boxes."""
    _, h, w = x.shape
    pts = grid_points(h, w, pipeline.cfg.grid)
    boxes = localize_batch(pipeline.localizer, x, pts, pipeline.cfg)
    found = [b for b in boxes if b is not None]
    if not found:
        return [], boxes
    labels, confs = pipeline.classify_glimpse(x, found)
    cands = [Candidate(box=b, class_label=int(l), confidence=float(c))
             for b, l, c in zip(found, labels, confs)]
    return nms(cands, pipeline.cfg.nms_iou), boxes


def predict(pipeline, x, mode, truth):
    """Evaluate one image; truth is an int (top/any) or a label set (multi)."""
    if mode not in ("top", "any", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    survivors, _ = collect_candidates(pipeline, x)
    truth_set = set(truth) if isinstance(truth, (set, list, tuple)) else {int(truth)}
    if not survivors:
        # documented fallback: classify the whole-image glimpse
        _, h, w = x.shape
        whole = Glimpse(0, 0, w, h)
        labels, confs = pipeline.classify_glimpse(x, [whole])
        survivors = [Candidate(box=whole, class_label=int(labels[0]), confidence=float(confs[0]))]
    top_label = survivors[0].class_label
    if mode == "top":
        correct = top_label in truth_set
    else:
        # any: single truth label; multi: any of the image's labels
        correct = any(c.class_label in truth_set for c in survivors)
    return {"mode": mode, "top_label": top_label, "correct": bool(correct),
            "labels": [c.class_label for c in survivors], "n_candidates": len(survivors)}


def predict_labels(pipeline, x_batch, mode="top", truths=None):
    """Batch evaluation; returns (top labels, correct flags)."""
    labels = np.empty(x_batch.shape[0], dtype=np.int64)
    correct = np.zeros(x_batch.shape[0], dtype=bool)
    for i in range(x_batch.shape[0]):
        t = truths[i] if truths is not None else -1
        rec = predict(pipeline, x_batch[i], mode, t)
        labels[i] = rec["top_label"]
        correct[i] = rec["correct"]
    return labels, correct


# ---------------------------------------------------------------------------
# localizer training: teacher-forced expansion toward the pseudo box

def _targets_batch(glimpses, boxes):
    t = np.array([expansion_targets(g, b) for g, b in zip(glimpses, boxes)], dtype=np.float32)
    return t


def train_localizer(localizer, dataset, cfg: zoo.TrainConfig, loc_cfg: LocalizeConfig):
    """Five-head binary cross-entropy training.

    Per image and epoch: one fixation sampled inside the pseudo box is
    teacher-forced toward it (switch target false); one fixation sampled
    outside contributes a single switch-true step with the expansion
    heads masked out.
    """
    images = dataset.pixel_array()
    boxes = dataset.box_array()
    n = images.shape[0]
    _, _, h, w = images.shape
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 47]))
    vel = nn.make_velocity(localizer.params)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, bb = images[idx], boxes[idx]
            bs = len(idx)
            # inside fixations, uniform within each pseudo box
            fx = rng.uniform(bb[:, 0], bb[:, 2])
            fy = rng.uniform(bb[:, 1], bb[:, 3])
            glimpses = [initial_glimpse((fx[i], fy[i]), loc_cfg.init_size, h, w) for i in range(bs)]
            active = np.ones(bs, dtype=bool)
            grad_sum = None
            loss_sum, loss_terms = 0.0, 0
            for _ in range(loc_cfg.steps):
                live = np.nonzero(active)[0]
                if not live.size:
                    break
                targets4 = _targets_batch([glimpses[i] for i in live], bb[live])
                crops = np.stack([crop_resize(xb[i], glimpses[i], loc_cfg.glimpse_res) for i in live])
                t5 = np.concatenate([targets4, np.zeros((len(live), 1), dtype=np.float32)], axis=1)
                loss, grads, _ = nn.loss_and_grads(localizer, crops, t5)
                grad_sum = _add_grads(grad_sum, grads)
                loss_sum += loss
                loss_terms += 1
                # teacher-forced growth toward the box, clamped at its edges
                for k, i in enumerate(live):
                    g = glimpses[i]
                    e = targets4[k]
                    nx1 = min(g.x1 + loc_cfg.step_px, int(bb[i, 2])) if e[0] else g.x1
                    nx0 = max(g.x0 - loc_cfg.step_px, int(bb[i, 0])) if e[1] else g.x0
                    ny1 = min(g.y1 + loc_cfg.step_px, int(bb[i, 3])) if e[2] else g.y1
                    ny0 = max(g.y0 - loc_cfg.step_px, int(bb[i, 1])) if e[3] else g.y0
                    if (nx0, ny0, nx1, ny1) == g.as_tuple() or not e.any():
                        active[i] = False
                    else:
                        glimpses[i] = Glimpse(nx0, ny0, nx1, ny1)
            # outside fixations: switch head only, expansions masked
            ofx, ofy = _sample_outside(bb, h, w, rng)
            valid = ~np.isnan(ofx)
            if valid.any():
                vi = np.nonzero(valid)[0]
                og = [initial_glimpse((ofx[i], ofy[i]), loc_cfg.init_size, h, w) for i in vi]
                crops = np.stack([crop_resize(xb[i], g, loc_cfg.glimpse_res) for i, g in zip(vi, og)])
                t5 = np.zeros((len(vi), 5), dtype=np.float32)
                t5[:, 4] = 1.0
                mask = np.zeros_like(t5)
                mask[:, 4] = 1.0
                loss, grads, _ = nn.loss_and_grads(localizer, crops, (t5, mask))
                grad_sum = _add_grads(grad_sum, grads)
                loss_sum += loss
                loss_terms += 1
            if not np.isfinite(loss_sum):
                raise DivergenceError(f"NaN loss at epoch {epoch}, batch {start // cfg.batch_size}")
            nn.sgd_step(localizer.params, grad_sum, vel, lr, cfg.momentum)
            losses.append(loss_sum / max(loss_terms, 1))
        history.append(float(np.mean(losses)))
    return localizer, history


def _add_grads(acc, grads):
    if acc is None:
        return [dict(g) for g in grads]
    for a, g in zip(acc, grads):
        for k, v in g.items():
            a[k] = a.get(k, 0) + v
    return acc


def _sample_outside(bb, h, w, rng, tries=16):
    """Uniform points outside each pseudo box; NaN when the box nearly
    fills the image and no sample lands outside."""
    n = bb.shape[0]
    fx = np.full(n, np.nan)
    fy = np.full(n, np.nan)
    for i in range(n):
        for _ in range(tries):
            px = rng.uniform(0, w)
            py = rng.uniform(0, h)
            if switch_target((px, py), bb[i]):
                fx[i], fy[i] = px, py
                break
    return fx, fy


# ---------------------------------------------------------------------------
# persistence

def save_pipeline(dirpath, pipeline: FalconPipeline):
    os.makedirs(dirpath, exist_ok=True)
    nn.save_model(os.path.join(dirpath, "localizer.avnw"), pipeline.localizer, "localizer")
    nn.save_model(os.path.join(dirpath, "classifier.avnw"), pipeline.classifier, "passive_classifier")
    c = pipeline.cfg
    with open(os.path.join(dirpath, "pipeline.txt"), "w") as f:
        f.write("kind=fixate_localize\n")
        for k, v in (("init_size", c.init_size), ("step_px", c.step_px), ("steps", c.steps),
                     ("threshold", c.threshold), ("grid", c.grid),
                     ("glimpse_res", f"{c.glimpse_res[0]},{c.glimpse_res[1]}"),
                     ("nms_iou", c.nms_iou)):
            f.write(f"{k}={v}\n")


def load_pipeline(dirpath):
    kv = {}
    with open(os.path.join(dirpath, "pipeline.txt")) as f:
        for line in f:
            k, v = line.strip().split("=", 1)
            kv[k] = v
    loc, _ = nn.load_model(os.path.join(dirpath, "localizer.avnw"), expect_role="localizer")
    clf, _ = nn.load_model(os.path.join(dirpath, "classifier.avnw"), expect_role="passive_classifier")
    cfg = LocalizeConfig(
        init_size=int(kv["init_size"]), step_px=int(kv["step_px"]), steps=int(kv["steps"]),
        threshold=float(kv["threshold"]), grid=int(kv["grid"]),
        glimpse_res=tuple(int(v) for v in kv["glimpse_res"].split(",")),
        nms_iou=float(kv["nms_iou"]))
    return FalconPipeline(localizer=loc, classifier=clf, cfg=cfg)
