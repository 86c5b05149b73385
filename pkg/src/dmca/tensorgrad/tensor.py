"""Reverse-mode autodiff over numpy arrays.

Operations are only recorded while a :class:`Tape` is active. Outside a tape
every op is a plain numpy computation, which is what rollouts use.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records the op graph of one forward pass.

    Nodes are appended in creation order, which is already a topological
    order, so :meth:`backward` just walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._used = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: "Tensor"):
        self.nodes.append(node)

    def backward(self, loss: "Tensor"):
        backward(self, loss)


def backward(tape: Tape, loss: "Tensor"):
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise RuntimeError("tape already consumed; rebuild the forward pass")
    tape._used = True
    loss._gacc = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node._gacc
        if g is None:
            continue
        node._gacc = None
        for parent, fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            contrib = fn(g)
            if parent._is_leaf:
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=parent.data.dtype)
                else:
                    parent.grad += contrib
            elif parent._gacc is None:
                parent._gacc = np.array(contrib, dtype=parent.data.dtype)
            else:
                parent._gacc = parent._gacc + contrib
    tape.nodes.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns", "_gacc", "_is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                                      and data.dtype.kind == "f" else DEFAULT_DTYPE))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._grad_fns = ()
        self._gacc = None
        self._is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fns) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._is_leaf = False
    out._parents = tuple(parents)
    out._grad_fns = tuple(grad_fns)
    tape.record(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.shape),
                  lambda g: _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules; a 1-D left operand is a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_b(g):
        if b.ndim == 2:
            # shared weight: contract the batch dims directly instead of
            # materialising one (k, n) product per batch element
            k, n = b.shape
            return a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _make(a.data @ b.data, (a, b),
                 (lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), grad_b))


# elementwise unary ops

def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), (lambda g: g * on,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), (lambda g: g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), (lambda g: g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), (lambda g: g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), (lambda g: g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), (lambda g: 2.0 * g * x.data,))


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(as_tensor(hard).data, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through shapes differ: {hard.shape} vs {soft.shape}")
    return _make(hard.copy(), (soft,), (lambda g: g,))


# reductions and shape ops

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return _make(out, (x,), (grad,))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), (lambda g: np.transpose(g, inv),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def grad(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return out

    return _make(x.data[idx], (x,), (grad,))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def make_grad(k):
        def grad(g):
            return np.split(g, cuts, axis=ax)[k]
        return grad

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 [make_grad(k) for k in range(len(xs))])


def stack(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def make_grad(k):
        return lambda g: np.take(g, k, axis=axis)

    return _make(np.stack([x.data for x in xs], axis=axis), xs,
                 [make_grad(k) for k in range(len(xs))])


# normalisers

def softmax(x, axis=-1, mask=None) -> Tensor:
    """Max-stabilised softmax. Positions where ``mask`` is False get exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), (lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), (lambda g: g - p * g.sum(axis=axis, keepdims=True),))
