"""Minimal dense-tensor NN engine with hand-written reverse-mode gradients.

Arrays are plain numpy ndarrays in NCHW layout (float32 by default; the
compute paths are dtype-generic so float64 can be used for gradient
checking). A model is a list of LayerSpec plus a parallel list of
parameter dicts. Supported layer kinds:

    conv2d, relu, maxpool, avgpool-global, dense,
    softmax-ce-head, sigmoid-head, gru-cell

The two head kinds are loss heads: `forward` stops at the logits feeding
them, `loss_and_grads` consumes them. gru-cell does not participate in
sequential `forward`; recurrent pipelines drive it through gru_forward /
gru_backward directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"AVNW"
VERSION = 1

KINDS = [
    "conv2d",
    "relu",
    "maxpool",
    "avgpool-global",
    "dense",
    "softmax-ce-head",
    "sigmoid-head",
    "gru-cell",
]

HEAD_KINDS = ("softmax-ce-head", "sigmoid-head")


@dataclass
class LayerSpec:
    kind: str
    hp: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.hp.get("pad", 0) < 0:
                raise ValueError("conv padding must be >= 0")
            if self.hp.get("stride", 1) < 1:
                raise ValueError("conv stride must be >= 1")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Output shape (without batch dim) for a given input shape."""
        k = self.kind
        if k == "conv2d":
            c, h, w = _expect_chw(in_shape, self)
            if c != self.hp["in_ch"]:
                raise ShapeError(f"conv2d expects {self.hp['in_ch']} channels, got {c}")
            kk, s, p = self.hp["kernel"], self.hp["stride"], self.hp["pad"]
            oh = (h + 2 * p - kk) // s + 1
            ow = (w + 2 * p - kk) // s + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv2d output {oh}x{ow} for input {h}x{w} (k={kk}, s={s}, p={p})")
            return (self.hp["out_ch"], oh, ow)
        if k == "relu":
            return in_shape
        if k == "maxpool":
            c, h, w = _expect_chw(in_shape, self)
            kk = self.hp["kernel"]
            if h % kk or w % kk:
                raise ShapeError(f"maxpool kernel {kk} does not divide {h}x{w}")
            return (c, h // kk, w // kk)
        if k == "avgpool-global":
            c, _, _ = _expect_chw(in_shape, self)
            return (c,)
        if k == "dense":
            flat = int(np.prod(in_shape))
            if flat != self.hp["in_dim"]:
                raise ShapeError(f"dense expects {self.hp['in_dim']} inputs, got {flat} from {in_shape}")
            return (self.hp["out_dim"],)
        if k in HEAD_KINDS:
            return in_shape
        if k == "gru-cell":
            return (self.hp["hidden"],)
        raise AssertionError(k)


def _expect_chw(shape, spec):
    if len(shape) != 3:
        raise ShapeError(f"{spec.kind} needs a CxHxW input, got shape {shape}")
    return shape


# ---------------------------------------------------------------------------
# parameter init

def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform init; biases zero. The sqrt(6/fan_in) bound
    keeps activation variance roughly constant through ReLU stacks, which
    matters for convergence speed at these depths."""
    def uni(fan_in, shape):
        s = float(np.sqrt(6.0 / fan_in))
        return rng.uniform(-s, s, size=shape).astype(dtype)

    k = spec.kind
    if k == "conv2d":
        ic, oc, kk = spec.hp["in_ch"], spec.hp["out_ch"], spec.hp["kernel"]
        return {"w": uni(ic * kk * kk, (oc, ic, kk, kk)), "b": np.zeros(oc, dtype=dtype)}
    if k == "dense":
        i, o = spec.hp["in_dim"], spec.hp["out_dim"]
        return {"w": uni(i, (i, o)), "b": np.zeros(o, dtype=dtype)}
    if k == "gru-cell":
        i, h = spec.hp["in_dim"], spec.hp["hidden"]
        p = {}
        for gate in ("z", "r", "h"):
            p["w" + gate] = uni(i, (i, h))
            p["u" + gate] = uni(h, (h, h))
            p["b" + gate] = np.zeros(h, dtype=dtype)
        return p
    return {}


# ---------------------------------------------------------------------------
# layer forward / backward primitives

def conv2d_forward(x, w, b, stride, pad):
    n, c, h, ww = x.shape
    oc, _, k, _ = w.shape
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (ww + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    cols2 = cols.reshape(n, c * k * k, oh * ow)
    wm = w.reshape(oc, c * k * k)
    out = np.matmul(wm[None], cols2)  # (n, oc, oh*ow)
    out += b[None, :, None]
    out = out.reshape(n, oc, oh, ow)
    return out, (x.shape, cols2, wm, stride, pad, k, oh, ow)


def conv2d_backward(dy, w, cache):
    xshape, cols2, wm, stride, pad, k, oh, ow = cache
    n, c, h, ww = xshape
    oc = wm.shape[0]
    dym = dy.reshape(n, oc, oh * ow)
    dwm = np.matmul(dym, cols2.transpose(0, 2, 1)).sum(axis=0)
    db = dym.sum(axis=(0, 2))
    dcols = np.matmul(wm.T[None], dym)  # (n, c*k*k, oh*ow)
    dcols = dcols.reshape(n, c, k, k, oh, ow)
    dxp = np.zeros((n, c, h + 2 * pad, ww + 2 * pad), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dcols[:, :, ki, kj]
    dx = dxp[:, :, pad:pad + h, pad:pad + ww] if pad else dxp
    return dx, {"w": dwm.reshape(w.shape), "b": db}


def relu_forward(x):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(dy, mask):
    return dy * mask


def maxpool_forward(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    xr = x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape, k)


def maxpool_backward(dy, cache):
    idx, xshape, k = cache
    n, c, h, w = xshape
    oh, ow = h // k, w // k
    dxr = np.zeros((n, c, oh, ow, k * k), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    return dxr.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def gap_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dy, xshape):
    n, c, h, w = xshape
    return np.broadcast_to(dy[:, :, None, None], xshape) / (h * w)


def dense_forward(x, w, b):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ w + b, (x2, x.shape)


def dense_backward(dy, w, cache):
    x2, xshape = cache
    dw = x2.T @ dy
    db = dy.sum(axis=0)
    dx = (dy @ w.T).reshape(xshape)
    return dx, {"w": dw, "b": db}


def softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer labels."""
    n = probs.shape[0]
    p = probs[np.arange(n), labels]
    return float(-np.log(np.maximum(p, 1e-12)).mean())


def bce(probs, targets, mask=None):
    """Mean binary cross-entropy; 0*log(0) treated as 0 so a perfect
    prediction scores exactly zero."""
    p = np.clip(probs, 1e-7, 1.0 - 1e-7)
    loss = -(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))
    loss = np.where(probs == targets, 0.0, loss)
    if mask is not None:
        total = mask.sum()
        return float((loss * mask).sum() / max(total, 1))
    return float(loss.mean())


def gru_forward(x, h, p):
    az = x @ p["wz"] + h @ p["uz"] + p["bz"]
    ar = x @ p["wr"] + h @ p["ur"] + p["br"]
    z = sigmoid(az)
    r = sigmoid(ar)
    rh = r * h
    ac = x @ p["wh"] + rh @ p["uh"] + p["bh"]
    hc = np.tanh(ac)
    hn = (1.0 - z) * h + z * hc
    return hn, (x, h, z, r, rh, hc)


def gru_backward(dhn, p, cache):
    x, h, z, r, rh, hc = cache
    dhc = dhn * z
    dz = dhn * (hc - h)
    dh = dhn * (1.0 - z)
    dac = dhc * (1.0 - hc * hc)
    daz = dz * z * (1.0 - z)
    drh = dac @ p["uh"].T
    dr = drh * h
    dh = dh + drh * r
    dar = dr * r * (1.0 - r)
    dx = daz @ p["wz"].T + dar @ p["wr"].T + dac @ p["wh"].T
    dh = dh + daz @ p["uz"].T + dar @ p["ur"].T
    grads = {
        "wz": x.T @ daz, "uz": h.T @ daz, "bz": daz.sum(axis=0),
        "wr": x.T @ dar, "ur": h.T @ dar, "br": dar.sum(axis=0),
        "wh": x.T @ dac, "uh": rh.T @ dac, "bh": dac.sum(axis=0),
    }
    return dx, dh, grads


# ---------------------------------------------------------------------------
# sequential model

class Model:
    """Sequential feedforward model: LayerSpec list + parameter dicts."""

    def __init__(self, specs: list[LayerSpec], params: list[dict], input_shape: tuple[int, int, int]):
        self.specs = specs
        self.params = params
        self.input_shape = tuple(input_shape)
        # validates the whole shape pipeline eagerly
        shape = self.input_shape
        for s in specs:
            shape = s.out_shape(shape)

    @classmethod
    def build(cls, specs, input_shape, seed, dtype=np.float32):
        params = [init_params(s, np.random.default_rng(np.random.SeedSequence([seed, i])), dtype)
                  for i, s in enumerate(specs)]
        return cls(specs, params, input_shape)

    @property
    def head_kind(self):
        return self.specs[-1].kind if self.specs and self.specs[-1].kind in HEAD_KINDS else None

    def out_dim(self):
        shape = self.input_shape
        for s in self.specs:
            shape = s.out_shape(shape)
        return int(np.prod(shape))

    def num_params(self):
        return sum(int(a.size) for p in self.params for a in p.values())

    def astype(self, dtype):
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return Model(self.specs, params, self.input_shape)

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"input shape {tuple(x.shape)} does not match model input "
                f"(N, {', '.join(map(str, self.input_shape))})")

    def forward(self, x, want_cache=False):
        """Run up to (and excluding) the loss head; returns logits/features.

        With want_cache=True also returns the per-layer caches needed by
        backward_from.
        """
        self._check_input(x)
        caches = []
        out = x
        for spec, p in zip(self.specs, self.params):
            k = spec.kind
            if k == "conv2d":
                out, c = conv2d_forward(out, p["w"], p["b"], spec.hp["stride"], spec.hp["pad"])
            elif k == "relu":
                out, c = relu_forward(out)
            elif k == "maxpool":
                out, c = maxpool_forward(out, spec.hp["kernel"])
            elif k == "avgpool-global":
                out, c = gap_forward(out)
            elif k == "dense":
                out, c = dense_forward(out, p["w"], p["b"])
            elif k in HEAD_KINDS:
                c = None  # logits pass through; the head is consumed by the loss
            elif k == "gru-cell":
                raise ShapeError("gru-cell cannot run inside a sequential forward pass")
            else:
                raise AssertionError(k)
            if want_cache:
                caches.append(c)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite activations in forward pass")
        return (out, caches) if want_cache else out

    def backward_from(self, dlogits, caches):
        """Backprop an output-side gradient through all non-head layers."""
        grads = [dict() for _ in self.specs]
        d = dlogits
        for i in range(len(self.specs) - 1, -1, -1):
            spec, p, c = self.specs[i], self.params[i], caches[i]
            k = spec.kind
            if k == "conv2d":
                d, g = conv2d_backward(d, p["w"], c)
                grads[i] = g
            elif k == "relu":
                d = relu_backward(d, c)
            elif k == "maxpool":
                d = maxpool_backward(d, c)
            elif k == "avgpool-global":
                d = gap_backward(d, c)
            elif k == "dense":
                d, g = dense_backward(d, p["w"], c)
                grads[i] = g
            elif k in HEAD_KINDS:
                pass
            else:
                raise AssertionError(k)
        return grads, d

    def predict_probs(self, x):
        logits = self.forward(x)
        if self.head_kind == "sigmoid-head":
            return sigmoid(logits)
        return softmax(logits)


def loss_and_grads(model: Model, x, y):
    """Loss plus (param grads, input grad) through the model's loss head.

    softmax-ce-head: y is an int label vector. sigmoid-head: y is a
    {0,1} target array matching the logits (optionally with a third
    mask array packed as a tuple (targets, mask)).
    """
    head = model.head_kind
    if head is None:
        raise ShapeError("model has no loss head")
    logits, caches = model.forward(x, want_cache=True)
    n = x.shape[0]
    if head == "softmax-ce-head":
        probs = softmax(logits)
        loss = cross_entropy(probs, y)
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
    else:
        targets, mask = y if isinstance(y, tuple) else (y, None)
        probs = sigmoid(logits)
        loss = bce(probs, targets, mask)
        dlogits = probs - targets
        if mask is not None:
            dlogits = dlogits * mask
            dlogits /= max(mask.sum(), 1)
        else:
            dlogits = dlogits / dlogits.size
    dlogits = dlogits.astype(logits.dtype)
    grads, dx = model.backward_from(dlogits, caches)
    return loss, grads, dx


def input_grad(model: Model, x, y):
    """Gradient of the cross-entropy loss w.r.t. the input pixels."""
    _, _, dx = loss_and_grads(model, x, y)
    if not np.all(np.isfinite(dx)):
        raise FloatingPointError("non-finite input gradient")
    return dx


# ---------------------------------------------------------------------------
# optimizer

def make_velocity(params):
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in params]


def sgd_step(params, grads, velocity, lr, momentum=0.0):
    """In-place SGD with classical momentum: v <- m*v + g; w <- w - lr*v."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    for p, g, v in zip(params, grads, velocity):
        for k in g:
            if p[k].shape != g[k].shape:
                raise ShapeError(f"grad shape {g[k].shape} != weight shape {p[k].shape} for {k!r}")
            v[k] = momentum * v[k] + g[k]
            p[k] -= np.asarray(lr * v[k], dtype=p[k].dtype)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers)

def bilinear_resize(x, out_h, out_w):
    """Resize NCHW images with half-pixel-center sampling.

    Resizing to the source size returns the input values exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bad output size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("zero-sized input image")
    if out_h == h and out_w == w:
        return x.copy()
    dt = x.dtype
    sy = np.float64(h) / out_h
    sx = np.float64(w) / out_w
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = (src_y - y0).astype(dt)
    wx = (src_x - x0).astype(dt)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(wy, 0.0, 1.0)[:, None]
    wx = np.clip(wx, 0.0, 1.0)[None, :]
    top = x[:, :, y0c][:, :, :, x0c] * (1 - wx) + x[:, :, y0c][:, :, :, x1c] * wx
    bot = x[:, :, y1c][:, :, :, x0c] * (1 - wx) + x[:, :, y1c][:, :, :, x1c] * wx
    return (top * (1 - wy) + bot * wy).astype(dt)


# ---------------------------------------------------------------------------
# serialization: magic "AVNW", version, role tag, input res, layer list

def _w_str(f, s):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _r_str(f):
    (n,) = struct.unpack("<I", _read(f, 4))
    return _read(f, n).decode("utf-8")


def _read(f, n):
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated weight file")
    return b


def save_model(path, model: Model, role: str = ""):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _w_str(f, role)
        f.write(struct.pack("<III", model.input_shape[0], model.input_shape[1], model.input_shape[2]))
        f.write(struct.pack("<I", len(model.specs)))
        for spec, params in zip(model.specs, model.params):
            f.write(struct.pack("<I", KINDS.index(spec.kind)))
            f.write(struct.pack("<I", len(spec.hp)))
            for k in sorted(spec.hp):
                _w_str(f, k)
                f.write(struct.pack("<q", int(spec.hp[k])))
            f.write(struct.pack("<I", len(params)))
            for k in sorted(params):
                _w_str(f, k)
                a = np.ascontiguousarray(params[k], dtype=np.float32)
                f.write(struct.pack("<I", a.ndim))
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
                f.write(a.astype("<f4").tobytes())


def load_model(path, expect_role: str | None = None):
    from .errors import RoleError
    with open(path, "rb") as f:
        if _read(f, 4) != MAGIC:
            raise FormatError(f"{path}: bad magic bytes")
        (ver,) = struct.unpack("<I", _read(f, 4))
        if ver != VERSION:
            raise FormatError(f"{path}: unsupported version {ver}")
        role = _r_str(f)
        ish = struct.unpack("<III", _read(f, 12))
        (nlayers,) = struct.unpack("<I", _read(f, 4))
        specs, params = [], []
        for _ in range(nlayers):
            (kid,) = struct.unpack("<I", _read(f, 4))
            if kid >= len(KINDS):
                raise FormatError(f"{path}: unknown layer kind id {kid}")
            (nhp,) = struct.unpack("<I", _read(f, 4))
            hp = {}
            for _ in range(nhp):
                k = _r_str(f)
                (v,) = struct.unpack("<q", _read(f, 8))
                hp[k] = int(v)
            specs.append(LayerSpec(KINDS[kid], hp))
            (npar,) = struct.unpack("<I", _read(f, 4))
            p = {}
            for _ in range(npar):
                k = _r_str(f)
                (nd,) = struct.unpack("<I", _read(f, 4))
                shape = struct.unpack(f"<{nd}I", _read(f, 4 * nd))
                count = int(np.prod(shape)) if nd else 1
                p[k] = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
            params.append(p)
        extra = f.read(1)
        if extra:
            raise FormatError(f"{path}: trailing bytes")
    if expect_role is not None and role != expect_role:
        raise RoleError(f"{path}: file role {role!r}, expected {expect_role!r}")
    return Model(specs, params, ish), role
