from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, grads: dict, state: AdamState, lr=1e-3, beta1=0.9,
              beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of every tensor in ``store``."""
    state.t += 1
    t = state.t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad for {name!r} has shape {g.shape}, param has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name!r} has shape {m.shape}, param has {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total
