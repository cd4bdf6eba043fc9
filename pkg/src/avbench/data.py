"""Synthetic cluttered-shape dataset with exact bounding boxes.

Ten classes: five shapes (disk, square, triangle, cross, ring) in two
color families. Each image has one primary object at a random position
and scale over a smooth cluttered background; its box is recomputed from
the rendered pixel mask, so recorded boxes are tight by construction.
An optional fraction of images carries a second object of a different
class for the multi-object prediction mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import bilinear_resize

SHAPES = ("disk", "square", "triangle", "cross", "ring")
COLOR_FAMILIES = (
    np.array([0.90, 0.25, 0.20], dtype=np.float32),  # warm
    np.array([0.20, 0.35, 0.90], dtype=np.float32),  # cold
)
NUM_CLASSES = len(SHAPES) * len(COLOR_FAMILIES)


@dataclass
class LabeledImage:
    pixels: np.ndarray            # 3xHxW float32 in [0,1]
    labels: list[int]
    boxes: list[tuple[int, int, int, int]]   # (x0, y0, x1, y1) exclusive

    def __post_init__(self):
        assert len(self.labels) >= 1 and len(self.labels) == len(self.boxes)


@dataclass
class Dataset:
    images: list[LabeledImage] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def pixel_array(self):
        return np.stack([im.pixels for im in self.images])

    def label_array(self):
        """Primary (first) label per image."""
        return np.array([im.labels[0] for im in self.images])

    def box_array(self):
        return np.array([im.boxes[0] for im in self.images])


def class_name(label):
    return f"{SHAPES[label // 2]}_{'warm' if label % 2 == 0 else 'cold'}"


def _shape_mask(shape, h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    r = radius
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # upward triangle inscribed in the radius box
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = max(r // 3, 1)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        inner = max(r * 0.55, 1.0)
        return (d2 <= r * r) & (d2 >= inner * inner)
    raise ValueError(shape)


def _background(h, w, clutter_level, rng):
    base = rng.uniform(0.25, 0.55)
    img = np.full((3, h, w), base, dtype=np.float32)
    img += rng.normal(0.0, 0.02, size=(3, h, w)).astype(np.float32)
    if clutter_level > 0:
        # smooth blotches: coarse noise upsampled to image size; mostly
        # shared across channels so the object stays the dominant
        # chromatic content even though it is alpha-blended in
        luma = rng.uniform(-0.5, 0.5, size=(1, 6, 6)).astype(np.float32)
        chroma = rng.uniform(-0.5, 0.5, size=(3, 6, 6)).astype(np.float32)
        coarse = np.repeat(luma, 3, axis=0) + 0.25 * chroma
        img += clutter_level * 0.35 * bilinear_resize(coarse[None], h, w)[0]
        # a few small achromatic distractor dots
        for _ in range(int(round(clutter_level * 6))):
            r = int(rng.integers(2, max(h // 24, 3)))
            cy = int(rng.integers(r, h - r))
            cx = int(rng.integers(r, w - r))
            m = _shape_mask("disk", h, w, cy, cx, r)
            img[:, m] = rng.uniform(0.1, 0.8)
    return np.clip(img, 0.0, 1.0)


# Objects are alpha-blended into the background rather than painted at
# full opacity: with full-contrast shapes the per-pixel class evidence is
# so strong that trained classifiers stay accurate well outside the usual
# 8/255 perturbation budget, which defeats the point of the benchmark.
OBJECT_BLEND = 0.5


def _render_object(img, label, rng, scale_range=(0.30, 0.55)):
    _, h, w = img.shape
    shape = SHAPES[label // 2]
    color = COLOR_FAMILIES[label % 2] + rng.uniform(-0.06, 0.06, size=3).astype(np.float32)
    color = np.clip(color, 0.0, 1.0)
    radius = int(round(rng.uniform(*scale_range) * min(h, w) / 2))
    radius = max(radius, 4)
    cy = int(rng.integers(radius, h - radius))
    cx = int(rng.integers(radius, w - radius))
    mask = _shape_mask(shape, h, w, cy, cx, radius)
    for c in range(3):
        vals = color[c] + rng.normal(0.0, 0.02, size=int(mask.sum()))
        img[c][mask] = np.clip((1.0 - OBJECT_BLEND) * img[c][mask]
                               + OBJECT_BLEND * vals, 0.0, 1.0)
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return box, mask


def gen_synth_dataset(num_classes=NUM_CLASSES, per_class=200, h=128, w=128,
                      clutter_level=0.5, seed=42, multi_fraction=0.0):
    """Deterministic dataset: per_class images for each class, in class order."""
    if num_classes > NUM_CLASSES:
        raise ValueError(f"at most {NUM_CLASSES} classes available")
    ds = Dataset()
    for label in range(num_classes):
        for j in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, label, j]))
            img = _background(h, w, clutter_level, rng)
            box, mask = _render_object(img, label, rng)
            labels, boxes = [label], [box]
            if multi_fraction > 0 and rng.uniform() < multi_fraction:
                other = int(rng.integers(0, num_classes - 1))
                if other >= label:
                    other += 1
                for _ in range(8):  # retry until the second object avoids the first
                    b2, m2 = _trial_second(img.shape, other, rng)
                    if not (m2 & mask).any():
                        img2 = img.copy()
                        _paint(img2, other, m2, rng)
                        img = img2
                        labels.append(other)
                        boxes.append(b2)
                        break
            ds.images.append(LabeledImage(pixels=img.astype(np.float32), labels=labels, boxes=boxes))
    return ds


def _trial_second(shape3, label, rng):
    _, h, w = shape3
    s = SHAPES[label // 2]
    radius = max(int(round(rng.uniform(0.18, 0.30) * min(h, w) / 2)), 4)
    cy = int(rng.integers(radius, h - radius))
    cx = int(rng.integers(radius, w - radius))
    m = _shape_mask(s, h, w, cy, cx, radius)
    ys, xs = np.nonzero(m)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1), m


def _paint(img, label, mask, rng):
    color = np.clip(COLOR_FAMILIES[label % 2] + rng.uniform(-0.06, 0.06, size=3).astype(np.float32), 0, 1)
    for c in range(3):
        img[c][mask] = np.clip((1.0 - OBJECT_BLEND) * img[c][mask]
                               + OBJECT_BLEND * color[c], 0.0, 1.0)


# ---------------------------------------------------------------------------
# persistence: raw float32 image files + text manifest

def save_dataset(dirpath, ds: Dataset, tag=""):
    import os
    os.makedirs(dirpath, exist_ok=True)
    lines = [f"AVDS 1 n={len(ds)} tag={tag}"]
    for i, im in enumerate(ds.images):
        name = f"img_{i:05d}.f32"
        with open(os.path.join(dirpath, name), "wb") as f:
            f.write(np.ascontiguousarray(im.pixels, dtype="<f4").tobytes())
        c, h, w = im.pixels.shape
        labs = ";".join(str(l) for l in im.labels)
        boxes = ";".join(",".join(map(str, b)) for b in im.boxes)
        lines.append(f"{i} {name} {c}x{h}x{w} {labs} {boxes}")
    with open(os.path.join(dirpath, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(dirpath):
    import os
    from .errors import FormatError
    mpath = os.path.join(dirpath, "manifest.txt")
    with open(mpath) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("AVDS 1 "):
        raise FormatError(f"{mpath}: bad manifest header")
    ds = Dataset()
    for line in lines[1:]:
        _, name, dims, labs, boxes = line.split(" ")
        c, h, w = map(int, dims.split("x"))
        with open(os.path.join(dirpath, name), "rb") as f:
            px = np.frombuffer(f.read(), dtype="<f4").reshape(c, h, w).copy()
        ds.images.append(LabeledImage(
            pixels=px,
            labels=[int(t) for t in labs.split(";")],
            boxes=[tuple(int(v) for v in b.split(",")) for b in boxes.split(";")]))
    return ds


def split_train_test(ds: Dataset, per_class_test, num_classes=NUM_CLASSES):
    """Last per_class_test images of each class block form the test set."""
    per_class = len(ds) // num_classes
    train, test = Dataset(), Dataset()
    for label in range(num_classes):
        block = ds.images[label * per_class:(label + 1) * per_class]
        train.images.extend(block[:per_class - per_class_test])
        test.images.extend(block[per_class - per_class_test:])
    return train, test
