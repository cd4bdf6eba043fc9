"""Shared numeric test helpers: finite-difference gradient checks."""

import numpy as np

from avbench import nn


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x (float64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / denom)


def check_model_grads(model, x, y, h=1e-6, tol=1e-4, param_samples=40, seed=0):
    """Compare analytic parameter and input gradients against central
    differences. Parameters are spot-checked at a seeded coordinate sample;
    the input gradient is checked densely. Returns the worst relative error.
    """
    m64 = model.astype(np.float64)
    x = x.astype(np.float64)
    _, grads, dx = nn.loss_and_grads(m64, x, y)

    worst = 0.0
    rng = np.random.default_rng(seed)
    for li, p in enumerate(m64.params):
        for name, w in p.items():
            flat = w.reshape(-1)
            idx = rng.choice(flat.size, size=min(param_samples, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = nn.loss_and_grads(m64, x, y)[0]
                flat[i] = old - h
                fm = nn.loss_and_grads(m64, x, y)[0]
                flat[i] = old
                num = (fp - fm) / (2 * h)
                ana = grads[li][name].reshape(-1)[i]
                err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
                worst = max(worst, err)
                assert err < tol, (f"layer {li} ({m64.specs[li].kind}) param {name}[{i}]: "
                                   f"numeric {num:.8f} vs analytic {ana:.8f}")

    ndx = numeric_grad(lambda xx: nn.loss_and_grads(m64, xx, y)[0], x, h=h)
    err = rel_err(ndx, dx)
    worst = max(worst, err)
    assert err < tol, f"input gradient rel err {err}"
    return worst
