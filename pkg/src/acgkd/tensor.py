"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the pipeline is a :class:`Tensor`. Applying a
primitive to tensors that require gradients records a :class:`TapeNode` on the
output; :func:`backward` walks those nodes in strictly decreasing id order,
which is a reverse topological order because ids are handed out at creation.

Arrays may carry leading batch axes (graphs are stored as ``m x n x d``), the
primitives broadcast like numpy and reduce gradients back to input shapes.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "TapeNode", "ShapeError", "NumericError", "UsageError",
    "apply_primitive", "backward", "no_grad", "grad_enabled", "as_tensor",
    "finite_difference_gradient", "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(ArithmeticError):
    """A primitive left its domain or produced a non-finite value."""


class UsageError(RuntimeError):
    """The tape was used incorrectly (e.g. backward on a detached tensor)."""


_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    out_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", [self, as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [as_tensor(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scalar_mul", [self], c=float(other))
        return apply_primitive("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scalar_mul", [self], c=1.0 / float(other))
        return apply_primitive("div", [self, as_tensor(other)])

    def __rtruediv__(self, other):
        return apply_primitive("div", [as_tensor(other), self])

    def __neg__(self):
        return apply_primitive("scalar_mul", [self], c=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, as_tensor(other)])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [as_tensor(other), self])

    @property
    def T(self):
        return apply_primitive("transpose", [self])

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives: each returns (output array, vjp) where vjp maps the upstream
# gradient to one gradient (or None) per input


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(*shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


def _p_add(a, b, needs=(True, True)):
    _broadcast_shape(a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape) if needs[0] else None,
                             _unbroadcast(g, b.shape) if needs[1] else None)


def _p_sub(a, b, needs=(True, True)):
    _broadcast_shape(a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape) if needs[0] else None,
                             _unbroadcast(-g, b.shape) if needs[1] else None)


def _p_mul(a, b, needs=(True, True)):
    _broadcast_shape(a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape) if needs[0] else None,
                             _unbroadcast(g * a, b.shape) if needs[1] else None)


def _p_div(a, b, needs=(True, True)):
    _broadcast_shape(a.shape, b.shape)
    if np.any(b == 0):
        raise NumericError("division by zero")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape) if needs[0] else None,
                           _unbroadcast(-g * out / b, b.shape) if needs[1] else None)


def _p_scalar_mul(a, c):
    return a * c, lambda g: (g * c,)


def _p_matmul(a, b, needs=(True, True)):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a, b)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb

    return out, vjp


def _p_transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs >=2-D input")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


def _p_concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _p_softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, vjp


def _p_log_softmax(a, axis=-1):
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return out, vjp


def _p_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


def _p_relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _p_leaky_relu(a, slope=0.2):
    scale = np.where(a > 0, 1.0, slope)
    return a * scale, lambda g: (g * scale,)


def _p_exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflow")
    return out, lambda g: (g * out,)


def _p_log(a):
    if np.any(a <= 0):
        raise NumericError("log of non-positive value")
    return np.log(a), lambda g: (g / a,)


def _p_power(a, p):
    if not float(p).is_integer() and np.any(a <= 0):
        raise NumericError(f"non-integer power {p} of non-positive value")
    out = a ** p
    return out, lambda g: (g * p * a ** (p - 1),)


def _p_square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _p_sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _p_mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


def _p_row_sum(a):
    return _p_sum(a, axis=-1, keepdims=True)


def _p_dropout(a, mask, rate):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} vs input {a.shape}")
    scale = mask / (1.0 - rate) if rate < 1.0 else np.zeros_like(mask)
    return a * scale, lambda g: (g * scale,)


def _p_clamp(a, lo=-np.inf, hi=np.inf):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


def _p_reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return out, lambda g: (g.reshape(a.shape),)


def _p_gradient_reversal(a, beta):
    if beta < 0:
        raise ValueError("gradient reversal scale must be >= 0")
    return a.copy(), lambda g: (-beta * g,)


def _p_symmetrize_triu(v, n):
    """Scatter ``(..., n(n-1)/2)`` upper-triangular entries into a symmetric
    ``(..., n, n)`` matrix with zero diagonal."""
    iu, ju = np.triu_indices(n, k=1)
    if v.shape[-1] != iu.size:
        raise ShapeError(f"expected {iu.size} triangular entries for n={n}, got {v.shape[-1]}")
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., iu, ju] = v
    out[..., ju, iu] = v
    return out, lambda g: (g[..., iu, ju] + g[..., ju, iu],)


PRIMITIVES: dict[str, Callable] = {
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "scalar_mul": _p_scalar_mul,
    "matmul": _p_matmul,
    "transpose": _p_transpose,
    "concat": _p_concat,
    "softmax": _p_softmax,
    "log_softmax": _p_log_softmax,
    "sigmoid": _p_sigmoid,
    "relu": _p_relu,
    "leaky_relu": _p_leaky_relu,
    "exp": _p_exp,
    "log": _p_log,
    "power": _p_power,
    "square": _p_square,
    "sum": _p_sum,
    "mean": _p_mean,
    "row_sum": _p_row_sum,
    "dropout": _p_dropout,
    "clamp": _p_clamp,
    "reshape": _p_reshape,
    "gradient_reversal": _p_gradient_reversal,
    "symmetrize_triu": _p_symmetrize_triu,
}


# binary primitives whose vjp skips operands that do not require grad
_SKIPS_CONSTANTS = frozenset({"add", "sub", "mul", "div", "matmul"})


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the tape when needed."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    if kind in _SKIPS_CONSTANTS:
        attrs["needs"] = tuple(t.requires_grad for t in inputs)
    with np.errstate(divide="raise", invalid="raise", over="raise", under="ignore"):
        try:
            out, vjp = fn(*(t.data for t in inputs), **attrs)
        except FloatingPointError as exc:
            raise NumericError(f"{kind}: {exc}") from exc
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind} produced non-finite values")
    result = Tensor(out)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = TapeNode(kind, inputs, result.id, vjp)
    return result


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed in ``leaves`` that the loss does not reach get a zero grad.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is detached from the tape")

    nodes: dict[int, TapeNode] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        if t.node is not None:
            nodes[t.id] = t.node
            stack.extend(i for i in t.node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        node = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference estimate of df/dx, evaluated without the tape.

    ``coords`` restricts evaluation to a subset of flat indices; the other
    entries of the returned array are NaN.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    base = x.data.copy()
    flat = x.data.reshape(-1)
    out = np.full(base.size, np.nan) if coords is not None else np.empty(base.size)
    idx = range(base.size) if coords is None else coords

    def value() -> float:
        with no_grad():
            r = f(x)
        return float(r.data) if isinstance(r, Tensor) else float(r)

    try:
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * eps)
    finally:
        x.data[...] = base
    return out.reshape(base.shape)
