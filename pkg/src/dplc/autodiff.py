"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs require gradients;
:func:`backward` walks the recorded nodes in strict reverse insertion order
and accumulates vector-Jacobian products.  Tapes are meant to live for a
single training step::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)
    grads[w]            # -> array([2., 2., 2.])

Elementwise operations follow numpy broadcasting; gradients are summed back
to the operand's shape.  At kinks the subgradient convention is
``relu'(0) = 0`` and ``clamp'`` is zero on (and outside) the interval
boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as _expit

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "TapeConsumedError",
    "apply",
    "record_custom",
    "backward",
    "grad_check",
    "as_tensor",
    "concat",
    "stack",
    "active_tape",
]

OP_KINDS = frozenset(
    {
        "add", "sub", "mul", "div", "matmul", "sum", "mean", "pow", "exp",
        "log", "tanh", "sigmoid", "relu", "clamp", "concat", "slice",
        "square", "sqrt", "max", "min", "neg", "stack", "minimum", "maximum",
    }
)


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    """Operand outside the mathematical domain of an op (log, sqrt, div)."""


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class TapeConsumedError(AutodiffError, RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __pow__(self, other):
        return apply("pow", self, other)

    def __rpow__(self, other):
        return apply("pow", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    def sum(self, axis=None):
        return apply("sum", self, axis=axis)

    def mean(self, axis=None):
        return apply("mean", self, axis=axis)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def tanh(self):
        return apply("tanh", self)

    def sigmoid(self):
        return apply("sigmoid", self)

    def relu(self):
        return apply("relu", self)

    def sqrt(self):
        return apply("sqrt", self)

    def square(self):
        return apply("square", self)

    def clamp(self, lo=None, hi=None):
        return apply("clamp", self, lo=lo, hi=hi)

    def maximum(self, value: float):
        return apply("max", self, value=value)

    def minimum(self, value: float):
        return apply("min", self, value=value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "vjp", "shape")

    def __init__(self, kind: str, inputs, vjp: Callable, shape: tuple[int, ...]):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Node ids are insertion indices, so every node's inputs precede it.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf_id(self, t: Tensor) -> int:
        if t._tape is not self or t.node_id is None:
            self.nodes.append(_Node("leaf", (), _no_vjp, t.data.shape))
            t.node_id = len(self.nodes) - 1
            t._tape = self
        return t.node_id

    def _input_id(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t._tape is self and t.node_id is not None:
            return t.node_id
        return self._leaf_id(t)

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp) -> Tensor:
        if self.consumed:
            raise TapeConsumedError("cannot record onto a tape after backward()")
        ids = [self._input_id(t) for t in inputs]
        self.nodes.append(_Node(kind, ids, vjp, out.data.shape))
        out.requires_grad = True
        out.node_id = len(self.nodes) - 1
        out._tape = self
        return out


def _no_vjp(g):
    return ()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    if a.shape != b.shape and a.ndim and b.ndim:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# forward + vjp builders; each returns (out_array, vjp)

def _op_add(a, b):
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return a + b, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


def _op_sub(a, b):
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return a - b, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))


def _op_mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _op_div(a, b):
    _check_broadcast("div", a, b)
    if np.any(b == 0.0):
        raise DomainError("div: division by zero")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _op_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a @ b

    def vjp(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b)
            gb = np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if a.ndim == 1:
            return g @ b.T, np.outer(a, g)
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return out, vjp


def _op_sum(a, axis=None):
    shape = a.shape
    out = a.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return out, vjp


def _op_mean(a, axis=None):
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    out = a.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return out, vjp


def _op_pow(a, b):
    _check_broadcast("pow", a, b)
    neg = a < 0.0
    if np.any(neg) and np.any(b != np.round(b)):
        raise DomainError("pow: negative base with non-integer exponent")
    out = a ** b

    def vjp(g):
        pos = a > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            da = np.where(a != 0.0, b * out / np.where(a != 0.0, a, 1.0), np.where(b == 1.0, 1.0, 0.0))
            db = np.where(pos, out * np.log(np.where(pos, a, 1.0)), 0.0)
        return _unbroadcast(g * da, a.shape), _unbroadcast(g * db, b.shape)

    return out, vjp


def _op_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _op_log(a):
    if np.any(a <= 0.0):
        raise DomainError("log: non-positive argument")
    return np.log(a), lambda g: (g / a,)


def _op_tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _sigmoid(a):
    return _expit(a)


def _op_sigmoid(a):
    out = _sigmoid(a)
    return out, lambda g: (g * out * (1.0 - out),)


def _op_relu(a):
    mask = a > 0.0
    return a * mask, lambda g: (g * mask,)


def _op_clamp(a, lo=None, hi=None):
    out = a
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        out = np.maximum(out, lo)
        mask &= a > lo
    if hi is not None:
        out = np.minimum(out, hi)
        mask &= a < hi
    return out, lambda g: (g * mask,)


def _op_max(a, value=0.0):
    mask = a > value
    return np.where(mask, a, value), lambda g: (g * mask,)


def _op_min(a, value=0.0):
    mask = a < value
    return np.where(mask, a, value), lambda g: (g * mask,)


def _op_minimum(a, b):
    _check_broadcast("minimum", a, b)
    first = a <= b
    return np.where(first, a, b), lambda g: (_unbroadcast(g * first, a.shape),
                                             _unbroadcast(g * ~first, b.shape))


def _op_maximum(a, b):
    _check_broadcast("maximum", a, b)
    first = a >= b
    return np.where(first, a, b), lambda g: (_unbroadcast(g * first, a.shape),
                                             _unbroadcast(g * ~first, b.shape))


def _op_square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _op_sqrt(a):
    if np.any(a < 0.0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return out, vjp


def _op_neg(a):
    return -a, lambda g: (-g,)


class _SliceGrad:
    """Gradient of a slice: scattered into the source accumulator in place."""

    __slots__ = ("index", "g", "shape")

    def __init__(self, index, g, shape):
        self.index, self.g, self.shape = index, g, shape


def _op_slice(a, index=None):
    shape = a.shape
    return a[index], lambda g: (_SliceGrad(index, g, shape),)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _op_concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _op_stack(*arrays, axis=0):
    try:
        out = np.stack(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(arrays)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))


_FORWARD = {
    "add": _op_add, "sub": _op_sub, "mul": _op_mul, "div": _op_div,
    "matmul": _op_matmul, "sum": _op_sum, "mean": _op_mean, "pow": _op_pow,
    "exp": _op_exp, "log": _op_log, "tanh": _op_tanh, "sigmoid": _op_sigmoid,
    "relu": _op_relu, "clamp": _op_clamp, "max": _op_max, "min": _op_min,
    "minimum": _op_minimum, "maximum": _op_maximum,
    "square": _op_square, "sqrt": _op_sqrt, "neg": _op_neg, "slice": _op_slice,
    "concat": _op_concat, "stack": _op_stack,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs``; record a tape node if any input needs grad.

    Non-tensor operands (floats, ndarrays) are treated as constants.
    ``minimum``/``maximum`` are the elementwise two-operand forms; at ties the
    gradient goes to the first operand.  Attribute keywords: ``axis`` for sum/mean/concat/stack, ``lo``/``hi`` for
    clamp, ``value`` for max/min, ``index`` for slice.
    """
    fwd = _FORWARD.get(op_kind)
    if fwd is None:
        raise ValueError(f"unknown op kind {op_kind!r}")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    out_data, vjp = fwd(*[t.data for t in tensors], **attrs)
    out = Tensor(out_data)
    if _TAPE_STACK:
        for t in tensors:
            if t.requires_grad:
                _TAPE_STACK[-1].record(op_kind, tensors, out, vjp)
                break
    return out


def record_custom(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    """Wrap a precomputed forward result with a hand-supplied vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input.  Used for fused
    kernels whose derivatives are computed outside the tape.
    """
    out = Tensor(out_data)
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        _TAPE_STACK[-1].record(kind, list(inputs), out, vjp)
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("stack", *tensors, axis=axis)


class Gradients(dict):
    """``node_id -> ndarray`` map that also accepts the leaf Tensor as key."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__getitem__(self, key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            if key.node_id is None:
                return default
            key = key.node_id
        return dict.get(self, key, default)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__contains__(self, key)


def backward(tape: Tape, output: Tensor, retain_all: bool = False) -> Gradients:
    """Accumulate d(output)/d(node) for every leaf on ``tape``.

    ``output`` must be a scalar recorded on ``tape``.  The tape is marked
    consumed afterwards.  With ``retain_all`` the map includes interior nodes.
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward()")
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not np.isfinite(output.data).all():
        raise NonFiniteError("backward: output is not finite")
    grads = Gradients()
    if output._tape is not tape or output.node_id is None:
        tape.consumed = True
        return grads
    acc: dict[int, np.ndarray] = {output.node_id: np.ones(output.shape)}
    owned: set[int] = set()
    nodes = tape.nodes
    for nid in range(output.node_id, -1, -1):
        g = acc.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.kind == "leaf":
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient reached leaf node {nid}")
            grads[nid] = np.array(g, copy=True)
            continue
        if retain_all:
            grads[nid] = g
        del acc[nid]
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            prev = acc.get(src)
            if type(gi) is _SliceGrad:
                if src not in owned:
                    buf = np.zeros(gi.shape)
                    if prev is not None:
                        buf += prev
                    acc[src] = prev = buf
                    owned.add(src)
                if _is_fancy(gi.index):
                    np.add.at(prev, gi.index, gi.g)
                else:
                    prev[gi.index] += gi.g
            elif prev is None:
                acc[src] = gi
            else:
                acc[src] = prev + gi
                owned.add(src)
    tape.consumed = True
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The relative error per coordinate
    is ``|ad - fd| / max(|ad|, |fd|, 1e-8)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    ad = backward(tape, y).get(xt)
    ad = np.zeros_like(x0) if ad is None else ad
    flat = x0.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = float(np.asarray(f(Tensor(plus.reshape(x0.shape))).data))
        fm = float(np.asarray(f(Tensor(minus.reshape(x0.shape))).data))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: f not finite at coordinate {i} +/- eps")
        fd[i] = (fp - fm) / (2.0 * eps)
    ad = ad.ravel()
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(ad - fd) / denom)) if flat.size else 0.0
