"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A computation is traced by calling it on :class:`Var` handles inside
:func:`record`.  Every primitive appends one node to the tape, and
:func:`backward` replays the tape in reverse to produce vector-Jacobian
products for every input.

The same primitives accept plain arrays, in which case they evaluate
directly; traced and untraced evaluation therefore run identical numpy code
and agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "UnsupportedOpError",
    "Var",
    "Tape",
    "record",
    "backward",
    "value_and_grad",
    "check_gradient",
    "tanh",
    "sin",
    "cos",
    "exp",
    "clamp",
    "sum",
    "mean",
    "concatenate",
    "stack",
    "reshape",
    "value",
]

PRIMITIVES = frozenset(
    {
        "input", "add", "sub", "mul", "div", "neg", "matmul", "tanh", "sin",
        "cos", "exp", "clamp", "sum", "mean", "pow", "concatenate", "stack",
        "slice", "reshape",
    }
)


class UnsupportedOpError(TypeError):
    """Raised when a traced value meets an operation outside the primitive set."""


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    ``values[k]`` is the output of ``nodes[k]``; parents always have smaller
    indices than their children, so reverse index order is a valid
    topological order for the backward sweep.
    """

    nodes: list[_Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    outputs: list[int | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, data, parents=(), vjp=None) -> "Var":
        self.nodes.append(_Node(op, tuple(parents), vjp))
        self.values.append(data)
        return Var(data, self, len(self.nodes) - 1)

    def input(self, data) -> "Var":
        arr = np.array(data, dtype=np.float64)
        v = self._push("input", arr)
        self.inputs.append(v.index)
        return v

    @property
    def output_shapes(self) -> list[tuple[int, ...]]:
        return [np.shape(self.values[i]) if i is not None else () for i in self.outputs]


class Var:
    """Handle to a traced array living on a :class:`Tape`."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, tape: Tape, index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, node={self.index})"

    def __add__(self, o):
        return _add(self, o)

    def __radd__(self, o):
        return _add(o, self)

    def __sub__(self, o):
        return _sub(self, o)

    def __rsub__(self, o):
        return _sub(o, self)

    def __mul__(self, o):
        return _mul(self, o)

    def __rmul__(self, o):
        return _mul(o, self)

    def __truediv__(self, o):
        return _div(self, o)

    def __rtruediv__(self, o):
        return _div(o, self)

    def __matmul__(self, o):
        return _matmul(self, o)

    def __rmatmul__(self, o):
        return _matmul(o, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, p)

    def __getitem__(self, key):
        return _slice(self, key)

    def __bool__(self):
        raise UnsupportedOpError("truth value of a traced array is not differentiable")

    def __float__(self):
        raise UnsupportedOpError("float() would detach a traced value")

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOpError("implicit conversion of a traced value to ndarray")

    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        if method == "__call__" and not kwargs and ufunc in _UFUNCS:
            return _UFUNCS[ufunc](*args)
        raise UnsupportedOpError(f"numpy.{ufunc.__name__} is not a differentiable primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy.{func.__name__} is not a differentiable primitive")


def value(x):
    """Underlying array of a traced or plain value."""
    return x.data if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, fwd, grads):
    """Build a broadcasting binary primitive.

    ``grads(a, b, out, g)`` returns the unreduced gradients for both operands.
    """

    def apply(a, b):
        tape = _tape_of(a, b)
        av, bv = value(a), value(b)
        out = fwd(av, bv)
        if tape is None:
            return out
        parents, which = [], []
        for k, x in enumerate((a, b)):
            if isinstance(x, Var):
                parents.append(x.index)
                which.append(k)
        a_shape, b_shape = np.shape(av), np.shape(bv)

        def vjp(g):
            ga, gb = grads(av, bv, out, g, which)
            res = []
            for k in which:
                res.append(_unbroadcast(ga, a_shape) if k == 0 else _unbroadcast(gb, b_shape))
            return tuple(res)

        return tape._push(op, out, parents, vjp)

    apply.__name__ = op
    return apply


_add = _binary("add", lambda a, b: a + b, lambda a, b, o, g, w: (g, g))
_sub = _binary("sub", lambda a, b: a - b, lambda a, b, o, g, w: (g, -g))
_mul = _binary(
    "mul",
    lambda a, b: a * b,
    lambda a, b, o, g, w: (g * b if 0 in w else None, g * a if 1 in w else None),
)
_div = _binary(
    "div",
    lambda a, b: a / b,
    lambda a, b, o, g, w: (g / b if 0 in w else None, -g * o / b if 1 in w else None),
)


def _matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("matmul primitive requires operands of rank >= 2")
    out = av @ bv
    if tape is None:
        return out
    parents = [x.index for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        res = []
        if isinstance(a, Var):
            res.append(_unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if isinstance(b, Var):
            res.append(_unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))
        return tuple(res)

    return tape._push("matmul", out, parents, vjp)


def _unary(op, fwd, deriv):
    def apply(x):
        if not isinstance(x, Var):
            return fwd(x)
        out = fwd(x.data)
        xv = x.data
        return x.tape._push(op, out, (x.index,), lambda g: (g * deriv(xv, out),))

    apply.__name__ = op
    return apply


_neg = _unary("neg", lambda x: -x, lambda x, o: -1.0)
tanh = _unary("tanh", np.tanh, lambda x, o: 1.0 - o * o)
sin = _unary("sin", np.sin, lambda x, o: np.cos(x))
cos = _unary("cos", np.cos, lambda x, o: -np.sin(x))
exp = _unary("exp", np.exp, lambda x, o: o)


def _pow(x, p):
    if isinstance(p, Var):
        raise UnsupportedOpError("only constant exponents are supported")
    p = float(p)
    if not isinstance(x, Var):
        return x**p
    xv = x.data
    out = xv**p
    return x.tape._push("pow", out, (x.index,), lambda g: (g * p * xv ** (p - 1.0),))


def clamp(x, low, high):
    """Elementwise clip to ``[low, high]``; gradient is zero at and beyond the bounds."""
    if not isinstance(x, Var):
        return np.clip(x, low, high)
    xv = x.data
    out = np.clip(xv, low, high)
    mask = (xv > low) & (xv < high)
    return x.tape._push("clamp", out, (x.index,), lambda g: (np.where(mask, g, 0.0),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xv = x.data
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape._push("sum", out, (x.index,), vjp)


def mean(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis, keepdims=keepdims)
    xv = x.data
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    count = xv.size // max(np.size(out), 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xv.shape).copy(),)

    return x.tape._push("mean", out, (x.index,), vjp)


def _slice(x, key):
    xv = x.data
    out = xv[key]

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        return (full,)

    return x.tape._push("slice", out, (x.index,), vjp)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concatenate(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]
    traced = [k for k, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        parts = np.split(g, cuts, axis=axis)
        return tuple(parts[k] for k in traced)

    return tape._push("concatenate", out, [xs[k].index for k in traced], vjp)


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    traced = [k for k, x in enumerate(xs) if isinstance(x, Var)]
    ax = axis if axis >= 0 else out.ndim + axis

    def vjp(g):
        return tuple(np.take(g, k, axis=ax) for k in traced)

    return tape._push("stack", out, [xs[k].index for k in traced], vjp)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    src = x.data.shape
    out = x.data.reshape(shape)
    return x.tape._push("reshape", out, (x.index,), lambda g: (g.reshape(src),))


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.matmul: _matmul,
    np.negative: _neg,
    np.tanh: tanh,
    np.sin: sin,
    np.cos: cos,
    np.exp: exp,
    np.power: lambda x, p: _pow(x, p),
}


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def record(computation: Callable, inputs: Sequence) -> tuple[list[np.ndarray], Tape]:
    """Trace ``computation(*inputs)`` and return its outputs together with the tape.

    The computation may return one value or a tuple/list of values.  Outputs
    that do not depend on any input are recorded as constants.
    """
    tape = Tape()
    handles = []
    for k, x in enumerate(inputs):
        arr = np.asarray(x, dtype=np.float64)
        _check_finite(arr, f"input {k}")
        handles.append(tape.input(arr))
    result = computation(*handles)
    results = list(result) if isinstance(result, (tuple, list)) else [result]
    outs = []
    for r in results:
        if isinstance(r, Var):
            if r.tape is not tape:
                raise ValueError("computation returned a value from a foreign tape")
            tape.outputs.append(r.index)
            outs.append(r.data)
        else:
            tape.outputs.append(None)
            outs.append(np.asarray(r, dtype=np.float64))
    return outs, tape


def backward(tape: Tape, seed, output: int = 0) -> list[np.ndarray]:
    """Vector-Jacobian product of output ``output`` with ``seed`` for every tape input."""
    out_idx = tape.outputs[output]
    out_shape = tape.output_shapes[output]
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != tuple(out_shape):
        raise ValueError(f"seed shape {seed.shape} does not match output shape {tuple(out_shape)}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    if out_idx is not None:
        grads[out_idx] = seed
        for k in range(out_idx, -1, -1):
            g = grads[k]
            node = tape.nodes[k]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                grads[p] = gp if grads[p] is None else grads[p] + gp
    return [
        grads[i] if grads[i] is not None else np.zeros_like(tape.values[i])
        for i in tape.inputs
    ]


def value_and_grad(computation: Callable, inputs: Sequence) -> tuple[float, list[np.ndarray]]:
    """Value and gradients of a scalar-valued computation."""
    (out,), tape = record(computation, inputs)
    if np.ndim(out) != 0:
        raise ValueError("value_and_grad requires a scalar output")
    return float(out), backward(tape, np.float64(1.0))


def check_gradient(computation: Callable, inputs: Sequence, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |central|)``."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    _, grads = value_and_grad(computation, arrays)
    worst = 0.0
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        g = grads[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(computation(*arrays))
            flat[j] = orig - h
            fm = float(computation(*arrays))
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(g[j] - fd) / max(1.0, abs(fd)))
    return worst
