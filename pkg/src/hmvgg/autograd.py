"""Tape-based reverse-mode automatic differentiation.

Every differentiable operation appends a node to a :class:`Tape` holding the
forward value, the ids of its inputs and a closure that maps the output
gradient to input gradients.  :func:`backward` walks the tape in exact
reverse append order, so recording order is the correctness contract.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import AutogradError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    backward: Optional[BackwardFn]
    requires_grad: bool


class Tape:
    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> "Variable":
        return self._append("leaf", T.as_tensor(value), (), None, requires_grad)

    def record(self, kind: str, value: np.ndarray, parents: Sequence["Variable"],
               backward_fn: BackwardFn) -> "Variable":
        for p in parents:
            if p.tape is not self:
                raise AutogradError("operands recorded on different tapes")
        rg = any(p.requires_grad for p in parents)
        return self._append(kind, T.as_tensor(value), tuple(p.id for p in parents),
                            backward_fn if rg else None, rg)

    def _append(self, kind, value, inputs, fn, requires_grad) -> "Variable":
        if self.consumed:
            raise AutogradError("tape already consumed by backward()")
        self.nodes.append(_Node(kind, inputs, fn, requires_grad))
        self.values.append(value)
        return Variable(value, self, len(self.nodes) - 1, requires_grad)


class Variable:
    """A value recorded on a tape."""

    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: Tape, id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad

    def __repr__(self) -> str:
        return f"Variable(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.ndim(other) == 0 and not isinstance(other, Variable):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axes=None, keep=False):
        return reduce_sum(self, axes, keep)

    def mean(self, axes=None, keep=False):
        return reduce_mean(self, axes, keep)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Variable):
            return a.tape
    return Tape()


def lift(x, tape: Tape) -> Variable:
    """Return ``x`` as a variable on ``tape``; raw arrays become constants."""
    if isinstance(x, Variable):
        if x.tape is not tape:
            raise AutogradError("operands recorded on different tapes")
        return x
    return tape.leaf(x, requires_grad=False)


def backward(tape: Tape, loss: Variable) -> dict[int, np.ndarray]:
    """Gradient of scalar ``loss`` for every requires-grad node on ``tape``.

    Nodes that do not lie on a path to the loss get exact zeros.  A tape can
    be differentiated once.
    """
    if loss.tape is not tape:
        raise AutogradError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise AutogradError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise AutogradError("backward called twice on the same tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for idx in range(loss.id, -1, -1):
        node = tape.nodes[idx]
        g = grads.get(idx)
        if g is None or node.backward is None:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.inputs, parent_grads):
            if pg is None or not tape.nodes[pid].requires_grad:
                continue
            if pg.shape != tape.values[pid].shape:
                raise AutogradError(
                    f"{node.kind}: gradient shape {pg.shape} != value shape {tape.values[pid].shape}")
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out = {}
    for idx, node in enumerate(tape.nodes):
        if node.requires_grad:
            g = grads.get(idx)
            out[idx] = np.zeros_like(tape.values[idx]) if g is None else g
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def _binary(kind, a, b):
    tape = tape_of(a, b)
    a, b = lift(a, tape), lift(b, tape)
    return tape, a, b, T.elementwise(kind, a.value, b.value)


def add(a, b) -> Variable:
    tape, a, b, out = _binary("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Variable:
    tape, a, b, out = _binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Variable:
    tape, a, b, out = _binary("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", out, (a, b),
                       lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def scale(a, factor: float) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    return tape.record("scale", T.elementwise("scale", a.value, factor), (a,), lambda g: (g * factor,))


def sigmoid(a) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    s = T.elementwise("sigmoid", a.value)
    return tape.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    mask = a.value > 0  # subgradient 0 at exactly 0
    return tape.record("relu", a.value * mask, (a,), lambda g: (g * mask,))


def reduce_sum(a, axes=None, keep: bool = False) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    shape = a.shape
    out = T.reduce("sum", a.value, axes, keep=True)
    kept = out.shape
    if not keep:
        out = T.reduce("sum", a.value, axes, keep=False)
    return tape.record("sum", out, (a,),
                       lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def reduce_mean(a, axes=None, keep: bool = False) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    shape = a.shape
    keep_out = T.reduce("mean", a.value, axes, keep=True)
    count = a.value.size // keep_out.size
    out = keep_out if keep else T.reduce("mean", a.value, axes, keep=False)
    kept = keep_out.shape
    return tape.record("mean", out, (a,),
                       lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),))


def reduce_max(a, axes=None, keep: bool = False) -> Variable:
    """Max reduction; the gradient goes to the first maximal element in row-major order."""
    tape = tape_of(a)
    a = lift(a, tape)
    x = a.value
    axes = tuple(range(x.ndim)) if axes is None else T._norm_axes(axes, x.ndim)
    rest = tuple(i for i in range(x.ndim) if i not in axes)
    moved = np.transpose(x, rest + axes)
    flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
    arg = flat.argmax(axis=-1)
    kept = T.reduce("max", x, axes, keep=True)
    out = kept if keep else T.reduce("max", x, axes, keep=False)
    kshape = kept.shape

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(kshape).reshape(arg.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(rest + axes)
        return (np.transpose(gmoved, inv).copy(),)

    return tape.record("max", out, (a,), back)


def matmul(a, b) -> Variable:
    tape = tape_of(a, b)
    a, b = lift(a, tape), lift(b, tape)
    av, bv = a.value, b.value
    return tape.record("matmul", T.matmul(av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g))


def reshape(a, shape) -> Variable:
    tape = tape_of(a)
    a = lift(a, tape)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return tape.record("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(items: Sequence, axis: int = 1) -> Variable:
    tape = tape_of(*items)
    items = [lift(x, tape) for x in items]
    try:
        out = np.concatenate([x.value for x in items], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([x.shape[axis] for x in items])[:-1]
    return tape.record("concat", out, items, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ------------------------------------------------------------ gradient check

def numeric_grad(f: Callable[[Variable], Variable], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` around ``x``."""
    x = T.as_tensor(x)
    out = np.empty_like(x)
    probe = x.copy()
    flat, oflat = probe.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tape().leaf(probe.copy())).value.reshape(()))
        flat[i] = orig - eps
        lo = float(f(Tape().leaf(probe.copy())).value.reshape(()))
        flat[i] = orig
        oflat[i] = (hi - lo) / (2.0 * eps)
    return out


def analytic_grad(f: Callable[[Variable], Variable], x: np.ndarray) -> np.ndarray:
    tape = Tape()
    v = tape.leaf(x)
    return backward(tape, f(v))[v.id]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable[[Variable], Variable], x, eps: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` receives a :class:`Variable` and must return a scalar variable
    recorded on the same tape.
    """
    x = T.as_tensor(x)
    return relative_error(analytic_grad(f, x), numeric_grad(f, x, eps))
