"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers the operation that produced
it.  ``loss.backward()`` walks the recorded graph in reverse topological
order and accumulates ``.grad`` on every tensor with ``requires_grad``.
Broadcasting follows numpy; gradients are summed back to each operand's
shape.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import _accel
from .errors import DimensionMismatchError

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)

# Discrete decisions (argmax, neighbour graphs, NN correspondences) can be
# recorded on one forward pass and replayed on later ones, so finite
# differences stay on the same smooth piece as the analytic gradient.
_branch_log = None
_branch_mode = None
_branch_pos = 0


def branch_choice(compute):
    """Evaluate ``compute()`` or replay the value recorded at this call position."""
    global _branch_pos
    if _branch_mode is None:
        return compute()
    if _branch_mode == "record":
        value = compute()
        _branch_log.append(value)
        return value
    value = _branch_log[_branch_pos]
    _branch_pos += 1
    return value


@contextlib.contextmanager
def record_branches():
    global _branch_log, _branch_mode
    log = []
    _branch_log, _branch_mode = log, "record"
    try:
        yield log
    finally:
        _branch_log, _branch_mode = None, None


@contextlib.contextmanager
def replay_branches(log):
    global _branch_log, _branch_mode, _branch_pos
    _branch_log, _branch_mode, _branch_pos = log, "replay", 0
    try:
        yield
    finally:
        _branch_log, _branch_mode, _branch_pos = None, None, 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis):
        return tmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU (smooth, which keeps finite-difference checks clean)."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _result(out, (a,), backward)


# -- reductions ----------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)
    return _result(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / count,))


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    arg = branch_choice(lambda: np.argmax(a.data, axis=axis))
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gx = g * gamma.data
        dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _result(out, (a, gamma, beta), backward)


# -- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),))


def getitem(a: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(a.data[key]), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


@_accel.njit
def _scatter_rows_kernel(out, rows, vals):
    for i in range(rows.shape[0]):
        r = rows[i]
        for j in range(vals.shape[1]):
            out[r, j] += vals[i, j]


def scatter_add_rows(out: np.ndarray, rows: np.ndarray, vals: np.ndarray) -> None:
    """``out[rows[i]] += vals[i]`` in index order (duplicates accumulate)."""
    if _accel.numba_enabled():
        _scatter_rows_kernel(out, rows, vals)
    else:
        np.add.at(out, rows, vals)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``a`` is (B, N, D), ``index`` (B, ...) -> (B, ..., D)."""
    b, n, d = a.shape
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != b:
        raise DimensionMismatchError("gather index must share the batch dimension")
    flat = (index.reshape(b, -1) + (np.arange(b) * n)[:, None]).reshape(-1)
    out = a.data.reshape(b * n, d)[flat].reshape(index.shape + (d,))

    def backward(g):
        acc = np.zeros((b * n, d), dtype=a.dtype)
        scatter_add_rows(acc, flat, np.ascontiguousarray(g.reshape(-1, d)))
        return (acc.reshape(a.shape),)

    return _result(out, (a,), backward)
