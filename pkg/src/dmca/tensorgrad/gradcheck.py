from __future__ import annotations

import numpy as np

from .nn import ParamStore
from .tensor import Tape


def analytic_grads(f, params: ParamStore) -> dict:
    params.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return {n: g.copy() for n, g in params.grads().items()}


def relative_error(a, n, floor=1e-12) -> float:
    """Norm-wise ||a - n|| / max(||a||, ||n||, floor)."""
    a, n = np.ravel(a), np.ravel(n)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / scale


def numeric_grad(f, p, eps=1e-6, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries ``idx`` of tensor ``p``."""
    flat = p.data.reshape(-1)
    idx = np.arange(flat.size) if idx is None else idx
    out = np.empty(len(idx))
    for m, k in enumerate(idx):
        orig = flat[k]
        flat[k] = orig + eps
        up = f().item()
        flat[k] = orig - eps
        down = f().item()
        flat[k] = orig
        out[m] = (up - down) / (2 * eps)
    return out


def grad_check(f, params: ParamStore, eps=1e-6, max_per_param=None, rng=None, report=None) -> float:
    """Max over parameter tensors of the norm-wise relative error between
    tape gradients and central differences (f(t+eps) - f(t-eps)) / 2eps.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``; it must be deterministic. ``max_per_param`` caps how many
    entries of each tensor are probed. Per-tensor errors go into ``report``
    (a dict) when given.
    """
    grads = analytic_grads(f, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        size = p.data.size
        idx = np.arange(size)
        if max_per_param is not None and size > max_per_param:
            idx = np.sort(rng.choice(size, max_per_param, replace=False))
        num = numeric_grad(f, p, eps, idx)
        err = relative_error(grads[name].reshape(-1)[idx], num)
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
