"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order. Because nodes
are only ever appended, index order is a valid topological order and
:meth:`Tape.backward` simply walks the tape in reverse.

Every primitive is also exposed as a module-level function (``tanh``,
``matmul``, ``concat``...). These dispatch on their arguments: if any argument
is a :class:`Node` the operation is recorded on that node's tape, otherwise it
is evaluated eagerly with numpy. The same model code therefore serves both the
differentiable path and the fast inference path.
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
SQRT_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# --- primitive forward / backward rules -------------------------------------
# backward(g, inputs, out, attrs, needs) -> tuple of input gradients (None where
# the input does not need one)


def _fwd_add(xs, attrs):
    _broadcast_check("add", *xs)
    return xs[0] + xs[1]


def _bwd_add(g, xs, out, attrs, needs):
    return (
        _unbroadcast(g, xs[0].shape) if needs[0] else None,
        _unbroadcast(g, xs[1].shape) if needs[1] else None,
    )


def _fwd_sub(xs, attrs):
    _broadcast_check("sub", *xs)
    return xs[0] - xs[1]


def _bwd_sub(g, xs, out, attrs, needs):
    return (
        _unbroadcast(g, xs[0].shape) if needs[0] else None,
        _unbroadcast(-g, xs[1].shape) if needs[1] else None,
    )


def _fwd_mul(xs, attrs):
    _broadcast_check("mul", *xs)
    return xs[0] * xs[1]


def _bwd_mul(g, xs, out, attrs, needs):
    a, b = xs
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _fwd_div(xs, attrs):
    _broadcast_check("div", *xs)
    return xs[0] / xs[1]


def _bwd_div(g, xs, out, attrs, needs):
    a, b = xs
    return (
        _unbroadcast(g / b, a.shape) if needs[0] else None,
        _unbroadcast(-g * out / b, b.shape) if needs[1] else None,
    )


def _fwd_scale(xs, attrs):
    return xs[0] * attrs["c"]


def _bwd_scale(g, xs, out, attrs, needs):
    return (g * attrs["c"],)


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", [a.shape, b.shape], "scalar operand")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError("matmul", [a.shape, b.shape], f"inner dims {k_a} != {k_b}")
    try:
        return np.matmul(a, b)
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape]) from None


def _bwd_matmul(g, xs, out, attrs, needs):
    a, b = xs
    if a.ndim == 1 and b.ndim == 1:
        return (g * b if needs[0] else None, g * a if needs[1] else None)
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    da = db = None
    if needs[0]:
        da = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
    if needs[1]:
        db = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
    return da, db


def _bwd_tanh(g, xs, out, attrs, needs):
    return (g * (1.0 - out * out),)


def _bwd_relu(g, xs, out, attrs, needs):
    return (g * (xs[0] > 0),)


def _bwd_square(g, xs, out, attrs, needs):
    return (2.0 * g * xs[0],)


def _fwd_sqrt(xs, attrs):
    return np.sqrt(xs[0] + attrs["eps"])


def _bwd_sqrt(g, xs, out, attrs, needs):
    return (0.5 * g / out,)


def _bwd_sin(g, xs, out, attrs, needs):
    return (g * np.cos(xs[0]),)


def _bwd_cos(g, xs, out, attrs, needs):
    return (-g * np.sin(xs[0]),)


def _fwd_atan2(xs, attrs):
    _broadcast_check("atan2", *xs)
    return np.arctan2(xs[0], xs[1])


def _bwd_atan2(g, xs, out, attrs, needs):
    y, x = xs
    r2 = x * x + y * y
    return (
        _unbroadcast(g * x / r2, y.shape) if needs[0] else None,
        _unbroadcast(-g * y / r2, x.shape) if needs[1] else None,
    )


def _fwd_clip(xs, attrs):
    return np.clip(xs[0], attrs["lo"], attrs["hi"])


def _bwd_clip(g, xs, out, attrs, needs):
    x = xs[0]
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


def _fwd_sum(xs, attrs):
    return np.sum(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(a % len(shape) for a in axes))
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, xs, out, attrs, needs):
    return (_expand_reduced(g, xs[0].shape, attrs["axis"], attrs["keepdims"]),)


def _fwd_mean(xs, attrs):
    return np.mean(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _bwd_mean(g, xs, out, attrs, needs):
    x = xs[0]
    n = x.size // max(out.size, 1)
    return (_expand_reduced(g, x.shape, attrs["axis"], attrs["keepdims"]) / n,)


def _fwd_concat(xs, attrs):
    axis = attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in xs], f"axis={axis}") from None


def _bwd_concat(g, xs, out, attrs, needs):
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _fwd_slice(xs, attrs):
    try:
        return xs[0][attrs["key"]]
    except IndexError:
        raise ShapeError("slice", [xs[0].shape], f"key={attrs['key']!r}") from None


def _bwd_slice(g, xs, out, attrs, needs):
    z = np.zeros_like(xs[0])
    z[attrs["key"]] = g
    return (z,)


def _unary(fn):
    return lambda xs, attrs: fn(xs[0])


PRIMITIVES: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "div": (_fwd_div, _bwd_div),
    "scale": (_fwd_scale, _bwd_scale),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "tanh": (_unary(np.tanh), _bwd_tanh),
    "relu": (_unary(lambda x: np.maximum(x, 0.0)), _bwd_relu),
    "square": (_unary(np.square), _bwd_square),
    "sqrt": (_fwd_sqrt, _bwd_sqrt),
    "sin": (_unary(np.sin), _bwd_sin),
    "cos": (_unary(np.cos), _bwd_cos),
    "atan2": (_fwd_atan2, _bwd_atan2),
    "clip": (_fwd_clip, _bwd_clip),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "concat": (_fwd_concat, _bwd_concat),
    "slice": (_fwd_slice, _bwd_slice),
}

# Leaf kinds have no forward rule.
_LEAF_CONST = "const"
_LEAF_VAR = "var"


class Node:
    """Handle to one recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tape.values[self.index].shape

    @property
    def ndim(self) -> int:
        return self.tape.values[self.index].ndim

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad(self)

    def __repr__(self):
        return f"Node(#{self.index}, op={self.tape.ops[self.index]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Append-only record of one forward computation.

    ``ops[i]``, ``inputs[i]`` and ``values[i]`` describe node ``i``; after
    :meth:`backward`, ``adjoints[i]`` holds d(root)/d(node i) (``None`` for
    nodes the root does not depend on).
    """

    def __init__(self):
        self.ops: List[str] = []
        self.inputs: List[Tuple[int, ...]] = []
        self.attrs: List[Optional[dict]] = []
        self.values: List[np.ndarray] = []
        self.requires: List[bool] = []
        self.adjoints: List[Optional[np.ndarray]] = []
        self.names: Dict[str, int] = {}

    def __len__(self):
        return len(self.values)

    def _append(self, op, inputs, attrs, value, requires) -> Node:
        self.ops.append(op)
        self.inputs.append(inputs)
        self.attrs.append(attrs)
        self.values.append(value)
        self.requires.append(requires)
        return Node(self, len(self.values) - 1)

    def constant(self, value) -> Node:
        return self._append(_LEAF_CONST, (), None, np.asarray(value, dtype=DTYPE), False)

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Register a leaf that gradients are taken with respect to."""
        node = self._append(_LEAF_VAR, (), None, np.array(value, dtype=DTYPE), True)
        if name is not None:
            if name in self.names:
                raise KeyError(f"variable {name!r} already on tape")
            self.names[name] = node.index
        return node

    def record(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        if op not in PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        idx = []
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input node belongs to a different tape")
            idx.append(x.index)
        fwd = PRIMITIVES[op][0]
        value = np.asarray(fwd([self.values[i] for i in idx], attrs), dtype=DTYPE)
        requires = any(self.requires[i] for i in idx)
        return self._append(op, tuple(idx), attrs, value, requires)

    def backward(self, root: Node, trace: Optional[list] = None) -> Dict[str, np.ndarray]:
        """Accumulate adjoints of every node with respect to scalar ``root``.

        Returns the gradients of all named variables. When ``trace`` is a list,
        ``("read", i)`` / ``("write", j)`` events are appended to it in order.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        n = root.index + 1
        adj: List[Optional[np.ndarray]] = [None] * len(self.values)
        adj[root.index] = np.ones_like(self.values[root.index])
        values, inputs, ops, attrs, requires = (
            self.values, self.inputs, self.ops, self.attrs, self.requires)
        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None or not inputs[i]:
                continue
            if trace is not None:
                trace.append(("read", i))
            ins = inputs[i]
            needs = tuple(requires[j] for j in ins)
            if not any(needs):
                continue
            grads = PRIMITIVES[ops[i]][1](g, [values[j] for j in ins], values[i], attrs[i], needs)
            for j, gj, need in zip(ins, grads, needs):
                if not need:
                    continue
                if trace is not None:
                    trace.append(("write", j))
                adj[j] = gj if adj[j] is None else adj[j] + gj
        self.adjoints = adj
        return {name: self.grad(Node(self, i)) for name, i in self.names.items()}

    def grad(self, node: Node) -> np.ndarray:
        if node.index < len(self.adjoints) and self.adjoints[node.index] is not None:
            return np.array(self.adjoints[node.index])
        return np.zeros_like(self.values[node.index])


def backward(tape: Tape, root: Node, trace: Optional[list] = None) -> Dict[str, np.ndarray]:
    return tape.backward(root, trace=trace)


# --- dispatching functional API ---------------------------------------------


def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _binary(op, np_fn, a, b):
    tape = _tape_of(a, b)
    if tape is None:
        a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
        _broadcast_check(op, a, b)
        return np_fn(a, b)
    return tape.record(op, [_lift(tape, a), _lift(tape, b)])


def add(a, b):
    return _binary("add", np.add, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, a, b)


def mul(a, b):
    return _binary("mul", np.multiply, a, b)


def div(a, b):
    return _binary("div", np.divide, a, b)


def atan2(y, x):
    return _binary("atan2", np.arctan2, y, x)


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _fwd_matmul([np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)], {})
    return tape.record("matmul", [_lift(tape, a), _lift(tape, b)])


def scale(x, c: float):
    if isinstance(x, Node):
        return x.tape.record("scale", [x], c=float(c))
    return np.asarray(x, dtype=DTYPE) * float(c)


def _unary_api(op, np_fn):
    def fn(x):
        if isinstance(x, Node):
            return x.tape.record(op, [x])
        return np_fn(np.asarray(x, dtype=DTYPE))

    fn.__name__ = op
    return fn


tanh = _unary_api("tanh", np.tanh)
relu = _unary_api("relu", lambda x: np.maximum(x, 0.0))
square = _unary_api("square", np.square)
sin = _unary_api("sin", np.sin)
cos = _unary_api("cos", np.cos)


def sqrt(x, eps: float = SQRT_EPS):
    """``sqrt(x + eps)``; the offset keeps the derivative finite at zero."""
    if isinstance(x, Node):
        return x.tape.record("sqrt", [x], eps=float(eps))
    return np.sqrt(np.asarray(x, dtype=DTYPE) + eps)


def clip(x, lo, hi):
    if isinstance(x, Node):
        return x.tape.record("clip", [x], lo=lo, hi=hi)
    return np.clip(np.asarray(x, dtype=DTYPE), lo, hi)


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.record("sum", [x], axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.record("mean", [x], axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def concat(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    if tape is None:
        return _fwd_concat([np.asarray(x, dtype=DTYPE) for x in xs], {"axis": axis})
    return tape.record("concat", [_lift(tape, x) for x in xs], axis=axis)


def slice_(x, key):
    if isinstance(x, Node):
        return x.tape.record("slice", [x], key=key)
    return np.asarray(x)[key]


def value_of(x) -> np.ndarray:
    """Numeric value of either a node or a plain array."""
    return x.value if isinstance(x, Node) else np.asarray(x)


def is_node(x) -> bool:
    return isinstance(x, Node)


# --- finite differences ------------------------------------------------------


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(f(x))
        flat[j] = orig - eps
        fm = float(f(x))
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over coordinates with ``|a| > floor``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    mask = np.abs(a) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))))
