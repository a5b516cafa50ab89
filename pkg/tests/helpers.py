"""Independent numerical oracles shared by the test modules.

Finite differences here are written directly against the public evaluation
functions so they stay independent of the reverse-mode code paths they check.
"""

import numpy as np

from apobench.diffnet import forward, loss_eval


def fd_param_gradient(model, theta, batch, h=1e-5, head=None):
    """Central finite differences of the batch loss over every parameter."""
    head = head or model.head
    flat = theta.to_flat()
    out = np.zeros_like(flat)

    def value(vec):
        th = theta.from_flat(vec)
        outputs, _ = forward(model, th, batch.inputs)
        return loss_eval(head, outputs, batch.targets)

    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        out[i] = (value(flat + e) - value(flat - e)) / (2 * h)
    return out


def fd_scalar_fn(fn, x0, h=1e-4):
    """Central-difference gradient of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (fn(x0 + e) - fn(x0 - e)) / (2 * h)
    return g


def rel_err(approx, exact, floor=1e-12):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(np.abs(exact).max(), floor)
    return float(np.abs(approx - exact).max() / scale)
