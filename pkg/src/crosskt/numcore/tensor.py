"""Reverse-mode automatic differentiation on dense float64 arrays.

numpy supplies array storage and BLAS kernels only; the differentiation
machinery lives here.  Every operation records its inputs and a closure
that maps the upstream gradient to per-input gradients.  `backward`
walks the recorded graph once in reverse topological order and
accumulates gradients on every tensor that requires them.

All values are float64.  Every operation checks its output for NaN/Inf
and raises `NumericalError` on the first non-finite entry, naming the
operation, so a blow-up surfaces where it happens rather than as a
mysterious downstream loss value.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError

Array = np.ndarray

_NEG_LARGE = -1e30  # additive mask value; exp(-1e30 - max) underflows to exact 0


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


def _check_finite(arr: Array, op: str) -> Array:
    with np.errstate(invalid="ignore"):
        ok = bool(np.all(np.isfinite(arr)))
    if not ok:
        raise NumericalError(f"non-finite value produced by op '{op}'")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _check_finite(_as_array(values), "tensor")
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level ops.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(values) -> Tensor:
    """A tensor that never receives gradients (masks, fixed features)."""
    return Tensor(values, requires_grad=False)


def _make(values: Array, op: str, parents: Sequence[Tensor],
          grad_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = _check_finite(values, op)
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = a.values + b.values

    def grad_fn(g: Array):
        ga = _unbroadcast(g, a.values.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.values.shape) if b.requires_grad else None
        return ga, gb

    return _make(values, "add", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = a.values * b.values

    def grad_fn(g: Array):
        ga = _unbroadcast(g * b.values, a.values.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.values.shape) if b.requires_grad else None
        return ga, gb

    return _make(values, "mul", (a, b), grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    with np.errstate(over="ignore"):
        values = a.values * factor

    def grad_fn(g: Array):
        return (g * factor,)

    return _make(values, "scale", (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1:
        raise NumericalError("matmul requires tensors with at least one axis")
    if a.values.shape[-1] != b.values.shape[-2 if b.ndim > 1 else -1]:
        raise NumericalError(
            f"matmul shape mismatch: {a.values.shape} @ {b.values.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        values = a.values @ b.values

    def grad_fn(g: Array):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.values) if g.ndim else g * b.values
            else:
                ga = _unbroadcast(g @ b.values.swapaxes(-1, -2), a.values.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.values, g) if g.ndim else a.values * g
            elif b.ndim == 1:
                gb = _unbroadcast((a.values.swapaxes(-1, -2) @ g[..., None])[..., 0],
                                  b.values.shape)
            else:
                gb = _unbroadcast(a.values.swapaxes(-1, -2) @ g, b.values.shape)
        return ga, gb

    return _make(values, "matmul", (a, b), grad_fn)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    values = np.transpose(a.values, axes)
    inverse = np.argsort(axes)

    def grad_fn(g: Array):
        return (np.transpose(g, inverse),)

    return _make(values, "transpose", (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.values.shape
    values = a.values.reshape(shape)

    def grad_fn(g: Array):
        return (g.reshape(original),)

    return _make(values, "reshape", (a,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise NumericalError("concat of zero tensors")
    values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g: Array):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if p.requires_grad else None
                     for piece, p in zip(pieces, parts))

    return _make(values, "concat", tuple(parts), grad_fn)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise NumericalError("stack of zero tensors")
    values = np.stack([p.values for p in parts], axis=axis)

    def grad_fn(g: Array):
        pieces = [np.squeeze(piece, axis=axis)
                  for piece in np.split(g, len(parts), axis=axis)]
        return tuple(piece if p.requires_grad else None
                     for piece, p in zip(pieces, parts))

    return _make(values, "stack", tuple(parts), grad_fn)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows of a 2D table selected by an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise NumericalError("gather_rows expects a 2D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise NumericalError("gather_rows index out of range")
    values = table.values[idx]

    def grad_fn(g: Array):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.values.shape[1]))
        return (gt,)

    return _make(values, "gather_rows", (table,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    values = np.maximum(a.values, 0.0)

    def grad_fn(g: Array):
        return (g * (a.values > 0.0),)

    return _make(values, "relu", (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    # Evaluate on the safe side of the exponential in both tails.
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def grad_fn(g: Array):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), grad_fn)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    v = a.values
    values = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def grad_fn(g: Array):
        s = np.empty_like(v)
        pos = v >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        s[~pos] = ev / (1.0 + ev)
        return (g * s,)

    return _make(values, "softplus", (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise NumericalError("log of non-positive value")
    values = np.log(a.values)

    def grad_fn(g: Array):
        return (g / a.values,)

    return _make(values, "log", (a,), grad_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero in the clamped regions."""
    values = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)

    def grad_fn(g: Array):
        return (g * inside,)

    return _make(values, "clip", (a,), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction along `axis`."""
    if a.values.shape[axis] == 0:
        raise NumericalError("softmax over an empty axis")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def grad_fn(g: Array):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    values = np.asarray(a.values.sum())

    def grad_fn(g: Array):
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return _make(values, "sum", (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise NumericalError("mean of an empty tensor")
    values = np.asarray(a.values.mean())

    def grad_fn(g: Array):
        return (np.full(a.values.shape, float(g) / n),)

    return _make(values, "mean", (a,), grad_fn)


def masked_mean(x: Tensor, mask: Tensor, axis: int | None = None) -> Tensor:
    """Mean of `x` over positions where `mask` is 1.

    axis=None averages every selected entry into a scalar; an integer
    axis averages along that axis only (used to pool per-sequence
    states, mask broadcast against x).  An empty mask is an error: the
    caller decides what a fallback value means.
    """
    m = np.broadcast_to(mask.values, x.values.shape)
    if axis is None:
        count = m.sum()
        if count == 0:
            raise NumericalError("masked_mean over an empty mask")
        values = np.asarray((x.values * m).sum() / count)

        def grad_fn(g: Array):
            gx = (float(g) / count) * m
            return (gx if x.requires_grad else None, None)

        return _make(values, "masked_mean", (x, mask), grad_fn)

    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise NumericalError("masked_mean over an empty mask along axis")
    values = (x.values * m).sum(axis=axis, keepdims=True) / count
    values = np.squeeze(values, axis=axis)

    def grad_fn(g: Array):
        gx = np.expand_dims(g, axis) / count * m
        return (gx if x.requires_grad else None, None)

    return _make(values, "masked_mean", (x, mask), grad_fn)


# ---------------------------------------------------------------------------
# regularization


def dropout(a: Tensor, p: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: surviving entries scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise NumericalError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise NumericalError("dropout in training mode requires a generator")
    keep = (rng.random(a.values.shape) >= p) / (1.0 - p)
    values = a.values * keep

    def grad_fn(g: Array):
        return (g * keep,)

    return _make(values, "dropout", (a,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor
    with requires_grad.  `loss` must be a scalar."""
    if loss.values.shape != ():
        raise NumericalError(
            f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise NumericalError("backward on a tensor with no recorded graph")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg
