"""Layers built from tensor primitives."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (Tensor, add, as_tensor, concat, matmul, mul, relu, reshape, sigmoid,
                     softmax, straight_through, tanh, transpose)


class ParamStore:
    """Ordered name -> trainable Tensor map."""

    def __init__(self, items=None):
        self._params: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items()}

    def snapshot(self) -> "ParamStore":
        """Deep copy of the current values (used as a read-only rollout snapshot)."""
        return ParamStore({n: Tensor(t.data.copy()) for n, t in self._params.items()})

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dense(x, W, b=None) -> Tensor:
    y = matmul(x, W)
    return y if b is None else add(y, b)


def attention(Q, K, V, mask=None) -> Tensor:
    """Scaled dot-product attention with row softmax.

    Works on any leading batch dims: Q is (..., s_q, d_k), K (..., s, d_k),
    V (..., s, d_v). ``mask`` (broadcastable to (..., s_q, s)) removes keys.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    d_k = Q.shape[-1]
    scores = mul(matmul(Q, transpose(K, _swap_last(K.ndim))), 1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=-1, mask=mask)
    return matmul(weights, V)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _project(x, W):
    """(B, s, d_in) x (h, d_in, d) -> (B, h, s, d) as one 2-D product over all heads."""
    B, s, d_in = x.shape
    h, _, d = W.shape
    flat = reshape(transpose(W, (1, 0, 2)), (d_in, h * d))
    y = matmul(reshape(x, (B * s, d_in)), flat)
    return transpose(reshape(y, (B, s, h, d)), (0, 2, 1, 3))


def multi_head_attention(seq, Wq, Wk, Wv, Wo, mask=None, query_rows=None) -> Tensor:
    """Concat(head_1..head_h) @ Wo with head_i = attention(X Wq_i, X Wk_i, X Wv_i).

    seq: (B, s, d_in); Wq, Wk: (h, d_in, d_k); Wv: (h, d_in, d_v); Wo: (h*d_v, d_out).
    mask: (B, s) bool of valid tokens. ``query_rows`` restricts the output to
    those sequence rows (keys and values still span the whole sequence).
    Returns (B, s_q, d_out).
    """
    seq = as_tensor(seq)
    Wq, Wk, Wv, Wo = map(as_tensor, (Wq, Wk, Wv, Wo))
    if seq.ndim != 3:
        raise ValueError(f"seq must be (B, s, d_in), got {seq.shape}")
    h, d_in, _ = Wq.shape
    if seq.shape[-1] != d_in or Wk.shape[:2] != (h, d_in) or Wv.shape[:2] != (h, d_in):
        raise ValueError("multi_head_attention projection shapes do not conform")
    d_v = Wv.shape[-1]
    if Wo.shape[0] != h * d_v:
        raise ValueError(f"Wo must have {h * d_v} rows, got {Wo.shape[0]}")
    B, s, _ = seq.shape
    xq = seq if query_rows is None else seq[:, query_rows, :]
    Q = _project(xq, Wq)   # (B, h, s_q, d_k)
    K = _project(seq, Wk)
    V = _project(seq, Wv)
    key_mask = None if mask is None else np.asarray(mask, bool)[:, None, None, :]
    heads = attention(Q, K, V, mask=key_mask)   # (B, h, s_q, d_v)
    s_q = heads.shape[2]
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (B, s_q, h * d_v))
    return matmul(merged, Wo)


def lstm_step(x, h, c, W, b):
    """One LSTM cell update.

    W: (d_in + H, 4H) acting on [x, h]; gate blocks ordered (input, forget,
    candidate, output). Returns (h', c').
    """
    x, h, c, W, b = map(as_tensor, (x, h, c, W, b))
    H = h.shape[-1]
    if W.shape != (x.shape[-1] + H, 4 * H) or b.shape[-1] != 4 * H or c.shape[-1] != H:
        raise ValueError(f"lstm_step shape mismatch: x{x.shape} h{h.shape} c{c.shape} W{W.shape}")
    z = add(matmul(concat([x, h], axis=-1), W), b)
    i = sigmoid(z[..., 0:H])
    f = sigmoid(z[..., H:2 * H])
    g = tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:4 * H])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # u == 0 would give inf; Generator.random is in [0, 1)
    u = np.where(u == 0.0, np.finfo(np.float64).tiny, u)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float = 1.0, rng=None, hard: bool = True, noise=None) -> Tensor:
    """Gumbel-softmax over the last axis.

    With ``hard`` the forward value is one-hot(argmax) and gradients flow
    through the soft sample. Pass ``noise`` to reuse a previous draw.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    logits = as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng or explicit noise")
        noise = sample_gumbel(rng, logits.shape)
    y = softmax(mul(add(logits, noise), 1.0 / tau), axis=-1)
    if not hard:
        return y
    onehot = np.zeros_like(y.data)
    np.put_along_axis(onehot, y.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return straight_through(onehot, y)


def mlp(x, layers, final_activation=None):
    """Affine layers with relu between; ``layers`` is a list of (W, b)."""
    for k, (W, b) in enumerate(layers):
        x = dense(x, W, b)
        if k < len(layers) - 1:
            x = relu(x)
    if final_activation is not None:
        x = final_activation(x)
    return x
