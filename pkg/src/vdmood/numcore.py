"""Small reverse-mode autodiff over float64 numpy arrays, plus a seeded Rng.

Only the operations the denoiser, the schedule network and the flow need are
provided. A :class:`Tensor` records the op that produced it; :func:`backward`
walks the resulting DAG once in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

DTYPE = np.float64
LAYERNORM_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A value on the tape.

    Leaves created with ``requires_grad=True`` are differentiable inputs
    (parameters or the latent fed to a divergence probe). Every other tensor
    is produced by an op and keeps a reference to its parents.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _node(av * bv, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

    return _node(av / bv, (a, b), back, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * xv * g,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return _node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def sin(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(np.sin(xv), (x,), lambda g: (g * np.cos(xv),), "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),), "cos")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.value.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, back, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[idx]`` with scatter-add gradient."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _node(table.value[idx], (table,), back, "take_rows")


# ---------------------------------------------------------------------------
# activations and normalization


def gelu(x) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    x = as_tensor(x)
    xv = x.value
    cdf = ndtr(xv)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _node(xv * cdf, (x,), back, "gelu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.value)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(np.logaddexp(0.0, xv), (x,), lambda g: (g * expit(xv),), "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = softmax_np(x.value, axis=axis)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def layer_norm(x, scale, shift, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply learnable ``scale``/``shift``."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xv = x.value
    n = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sv = scale.value

    def back(g):
        gs = _unbroadcast(g * xhat, scale.shape)
        gb = _unbroadcast(g, shift.shape)
        gx_hat = g * sv
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gs, gb

    return _node(xhat * sv + shift.value, (x, scale, shift), back, "layer_norm")


def softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Returns gradients for ``wrt`` in order; a tensor the loss does not depend
    on gets an all-zero gradient.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    for w in wrt:
        w.grad = None
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = []
    for w in wrt:
        if w.grad is None:
            w.grad = np.zeros_like(w.value)
        out.append(w.grad)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, *stream)``.

    Two instances with the same seed and stream produce identical draws, and
    :meth:`child` derives independent sub-streams without consuming state.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *ids: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(ids))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size, dtype=DTYPE)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def rademacher(self, size) -> np.ndarray:
        return self._gen.integers(0, 2, size=size).astype(DTYPE) * 2.0 - 1.0

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)
