"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active and
at least one operand requires a gradient is recorded on that tape together
with a backward rule. :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the float type of newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: "Tensor", inputs: tuple, rule: Callable):
        self.out = out
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.ops: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def clear(self) -> None:
        self.ops.clear()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording (inference mode)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(Node(out, tuple(inputs), rule))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input.

    The tape is consumed (cleared) afterwards.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = tape if tape is not None else active_tape()
    if not loss.requires_grad or tape is None:
        if tape is not None:
            tape.clear()
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.ops):
        g = node.out.grad
        if g is None:
            continue
        grads = node.rule(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is not None and inp.requires_grad:
                _accumulate(inp, gi)
        # intermediate gradients are not needed once propagated
        node.out.grad = None
    tape.clear()


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    long, short = (a, b) if len(a) >= len(b) else (b, a)
    tail = long[len(long) - len(short):]
    if all(s == t or s == 1 or t == 1 for s, t in zip(short, tail)):
        return
    raise ShapeError(f"incompatible shapes {list(a)} and {list(b)}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient passes where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _record(np.where(mask, a.data, a.data.dtype.type(floor)), (a,),
                   lambda g: (g * mask,))


def minimum(a, ceil: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data < ceil
    return _record(np.where(mask, a.data, a.data.dtype.type(ceil)), (a,),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {list(a.shape)} and {list(b.shape)} do not conform")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), rule)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as a single recorded op."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[-2] or b.shape[-1] != w.shape[-1]:
        raise ShapeError(
            f"affine shapes {list(x.shape)} @ {list(w.shape)} + {list(b.shape)} do not conform")
    xd, wd = x.data, w.data
    bshape = b.shape

    def rule(g):
        gx = _unbroadcast(g @ np.swapaxes(wd, -1, -2), xd.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            if xd.ndim == 2 and wd.ndim == 2:
                gw = xd.T @ g
            else:
                gw = _unbroadcast(np.swapaxes(xd, -1, -2) @ g, wd.shape)
        gb = _unbroadcast(g, bshape) if b.requires_grad else None
        return gx, gw, gb

    return _record(xd @ wd + b.data, (x, w, b), rule)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    # split by sign to stay finite for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    # expm1(x) >= x, so the max selects x on the positive side
    neg_part = np.expm1(np.minimum(d, 0.0))
    out = np.maximum(neg_part, d)
    return _record(out, (a,), lambda g: (g * (neg_part + 1.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative input")
    d = a.data
    return _record(np.log(d), (a,), lambda g: (g / d,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    out = np.logaddexp(0.0, d).astype(d.dtype)

    def rule(g):
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _record(out, (a,), rule)


def square(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return _record(d * d, (a,), lambda g: (2.0 * g * d,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(
                f"concat shapes {list(ts[0].shape)} and {list(t.shape)} differ off axis {ax}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in ts], axis=ax), ts, rule)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack shapes {list(ts[0].shape)} and {list(t.shape)} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _record(out, ts, rule)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _record(a.data[index], (a,), rule)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {list(old)} to {list(shape)}") from err
    return _record(out, (a,), lambda g: (g.reshape(old),))
