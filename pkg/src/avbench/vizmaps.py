"""Diagnostic emitters: fixation-outcome grids and occlusion heatmaps.

Both render to binary PPM (P6) files so no imaging dependency is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import falcon
from .errors import ShapeError

INITIAL = "initial"
CORRECT = "potential_correct"
INCORRECT = "potential_incorrect"

STATUS_CHAR = {INITIAL: ".", CORRECT: "C", INCORRECT: "x"}
STATUS_COLOR = {
    INITIAL: (255, 40, 40),      # red
    CORRECT: (40, 200, 40),      # green
    INCORRECT: (230, 40, 230),   # magenta
}
POTENTIAL_COLOR = (50, 80, 255)  # blue, used by the --split rendering


@dataclass
class IFPM:
    statuses: list          # g*g status strings, row-major over the fixation grid
    grid: int
    image_id: int
    truth: set

    def count(self, *statuses):
        return sum(1 for s in self.statuses if s in statuses)

    @property
    def potential(self):
        return self.count(CORRECT, INCORRECT)

    def text_grid(self):
        g = self.grid
        rows = ["".join(STATUS_CHAR[self.statuses[r * g + c]] for c in range(g)) for r in range(g)]
        return "\n".join(rows) + "\n"


def build_ifpm(pipeline: falcon.FalconPipeline, x, truth, image_id=0):
    """Classify every grid fixation's trajectory outcome for one image."""
    _, h, w = x.shape
    pts = falcon.grid_points(h, w, pipeline.cfg.grid)
    boxes = falcon.localize_batch(pipeline.localizer, x, pts, pipeline.cfg)
    truth_set = set(truth) if isinstance(truth, (set, list, tuple)) else {int(truth)}
    statuses = [INITIAL] * len(pts)
    found = [(i, b) for i, b in enumerate(boxes) if b is not None]
    if found:
        labels, _ = pipeline.classify_glimpse(x, [b for _, b in found])
        for (i, _), lab in zip(found, labels):
            statuses[i] = CORRECT if int(lab) in truth_set else INCORRECT
    return IFPM(statuses=statuses, grid=pipeline.cfg.grid, image_id=image_id, truth=truth_set)


@dataclass
class OcclusionMap:
    heat: np.ndarray
    window: int
    stride: int
    fill_value: float
    reference_label: int


def occlusion_map(score_fn, x, reference_label, window=16, stride=8, fill=0.5,
                  batch=64):
    """Confidence drop per occluder position.

    score_fn maps an NCHW batch to per-image class-probability rows;
    heat[i, j] = p(ref | x) - p(ref | x with the window at (i*stride,
    j*stride) filled). Models are typically passed as model.predict_probs.
    """
    _, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than image {h}x{w}")
    gh = (h - window) // stride + 1
    gw = (w - window) // stride + 1
    base = float(score_fn(x[None])[0][reference_label])
    occluded = np.empty((gh * gw,) + x.shape, dtype=x.dtype)
    for i in range(gh):
        for j in range(gw):
            o = x.copy()
            o[:, i * stride:i * stride + window, j * stride:j * stride + window] = fill
            occluded[i * gw + j] = o
    drops = np.empty(gh * gw, dtype=np.float64)
    for s in range(0, gh * gw, batch):
        probs = score_fn(occluded[s:s + batch])
        drops[s:s + batch] = base - probs[:, reference_label]
    return OcclusionMap(heat=drops.reshape(gh, gw), window=window, stride=stride,
                        fill_value=fill, reference_label=int(reference_label))


# ---------------------------------------------------------------------------
# PPM rendering

def _base_canvas(base_image):
    """Grayscale-dimmed uint8 HxWx3 canvas from a CHW float image."""
    gray = base_image.mean(axis=0)
    gray = np.clip(gray * 0.5, 0.0, 1.0)
    return np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)


def _dot(canvas, cy, cx, color, radius=3):
    h, w, _ = canvas.shape
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    m = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    canvas[y0:y1, x0:x1][m] = color


def write_ppm(path, canvas, comment=None):
    h, w, _ = canvas.shape
    with open(path, "wb") as f:
        f.write(b"P6\n")
        if comment:
            f.write(f"# {comment}\n".encode())
        f.write(f"{w} {h}\n255\n".encode())
        f.write(canvas.astype(np.uint8).tobytes())


def render_ifpm_ppm(ifpm: IFPM, base_image, path, comment=None, show=None):
    """Render fixation statuses as colored dots. show limits the statuses
    drawn (the split-per-status rendering); potential dots requested via
    show='potential' are drawn blue regardless of correctness."""
    canvas = _base_canvas(base_image)
    h, w, _ = canvas.shape
    g = ifpm.grid
    for r in range(g):
        for c in range(g):
            st = ifpm.statuses[r * g + c]
            if show == "potential":
                if st == INITIAL:
                    continue
                color = POTENTIAL_COLOR
            elif show is not None and st != show:
                continue
            else:
                color = STATUS_COLOR[st]
            cy = int((r + 0.5) * h / g)
            cx = int((c + 0.5) * w / g)
            _dot(canvas, cy, cx, color)
    write_ppm(path, canvas, comment)


def render_occlusion_ppm(occ: OcclusionMap, base_image, path, comment=None):
    """Heat as red-channel intensity over the dimmed base image."""
    canvas = _base_canvas(base_image)
    h, w, _ = canvas.shape
    span = max(float(np.abs(occ.heat).max()), 1e-9)
    norm = np.clip(occ.heat / span, 0.0, 1.0)
    gh, gw = occ.heat.shape
    for i in range(gh):
        for j in range(gw):
            v = int(norm[i, j] * 255)
            if v <= 0:
                continue
            y0 = i * occ.stride
            x0 = j * occ.stride
            cell = canvas[y0:y0 + occ.window, x0:x0 + occ.window]
            red = np.maximum(cell[:, :, 0].astype(int), v)
            cell[:, :, 0] = red.astype(np.uint8)
    write_ppm(path, canvas, comment)
