"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Tape`
records every primitive applied to its :class:`Var` handles; calling
:meth:`Tape.backward` on a scalar walks the recorded nodes in reverse and
accumulates vector-Jacobian products.

    >>> tape = Tape()
    >>> x = tape.variable([1.0, 2.0, 3.0])
    >>> y = sum_(mul(x, x))
    >>> tape.backward(y)[x]
    array([2., 4., 6.])

A tape belongs to one thread. Build a fresh tape for every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PROB_CLAMP = 1e-12
_TINY = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


def as_tensor(value) -> np.ndarray:
    """Copy ``value`` into a read-only float64 array."""
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Var:
    """Handle to a value registered on a tape."""

    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Gradients(dict):
    """Mapping from variable id to gradient; also indexable by :class:`Var`.

    Leaves not reached by the backward pass read as zeros of the right shape.
    """

    def __init__(self, tape: "Tape"):
        super().__init__()
        self._tape = tape

    def __getitem__(self, key):
        if isinstance(key, Var):
            if key.id in self:
                return dict.__getitem__(self, key.id)
            return np.zeros(key.shape)
        return dict.__getitem__(self, key)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.requires: list[bool] = []

    def _register(self, value: np.ndarray, requires_grad: bool) -> Var:
        value = np.asarray(value, dtype=np.float64)
        vid = len(self.values)
        self.values.append(value)
        self.requires.append(requires_grad)
        return Var(self, vid, value, requires_grad)

    def variable(self, value) -> Var:
        """Register a leaf that gradients are taken with respect to."""
        return self._register(np.array(value, dtype=np.float64), True)

    def constant(self, value) -> Var:
        return self._register(np.asarray(value, dtype=np.float64), False)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("operand belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, vjp) -> Var:
        requires = any(v.requires_grad for v in inputs)
        out = self._register(value, requires)
        if requires:
            self.nodes.append(Node(op, tuple(v.id for v in inputs), out.id, vjp))
        return out

    def backward(self, root: Var) -> Gradients:
        """Reverse-mode sweep from a scalar ``root``."""
        if root.tape is not self:
            raise TapeError("root is not on this tape")
        if root.value.size != 1:
            raise ShapeError("backward", root.shape, detail="root must be scalar")
        grads = Gradients(self)
        grads[root.id] = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            for vid, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.requires[vid]:
                    continue
                if vid in grads:
                    grads[vid] = grads[vid] + gi
                else:
                    grads[vid] = np.asarray(gi, dtype=np.float64)
        return grads


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# Backward rules live at module level so fault-injection tests can patch them.

def _vjp_add(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def _vjp_sub(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)


def _vjp_mul(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_matmul(g, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _vjp_relu(g, x, y):
    return (g * (x > 0),)


def _vjp_tanh(g, x, y):
    return (g * (1.0 - y * y),)


def _vjp_sigmoid(g, x, y):
    return (g * y * (1.0 - y),)


def _vjp_exp(g, x, y):
    return (g * y,)


def _vjp_log(g, x, y):
    return (g / np.maximum(x, PROB_CLAMP) * (x > PROB_CLAMP),)


def _vjp_abs(g, x, y):
    return (g * np.sign(x),)


def _vjp_softmax(g, x, y):
    inner = np.sum(g * y, axis=-1, keepdims=True)
    return (y * (g - inner),)


def _vjp_l1(g, a, b):
    s = np.sign(a - b) * g
    return s, -s


def _vjp_cross_entropy(g, p, onehot, n):
    # Clamp only shields the value from log(0); the gradient keeps using the
    # true probability so a saturated target still yields a descent direction.
    return (-g * onehot / np.maximum(p, _TINY) / n,)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", (a, b), a.value + b.value, lambda g: _vjp_add(g, sa, sb))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", (a, b), a.value - b.value, lambda g: _vjp_sub(g, sa, sb))


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", (a, b), av * bv, lambda g: _vjp_mul(g, av, bv))


mul_elementwise = mul


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be rank 1 or 2")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return tape.record("matmul", (a, b), av @ bv, lambda g: _vjp_matmul(g, av, bv))


def affine(x, W, b) -> Var:
    """``x @ W + b`` with ``W`` laid out as (fan_in, fan_out)."""
    tape = _tape_of(x, W, b)
    W, b = tape.lift(W), tape.lift(b)
    if b.shape != (W.shape[-1],):
        raise ShapeError("affine", W.shape, b.shape, detail="bias must match fan_out")
    return add(matmul(x, W), b)


def _unary(op, x, fwd, vjp_name):
    tape = _tape_of(x)
    x = tape.lift(x)
    xv = x.value
    y = fwd(xv)
    return tape.record(op, (x,), y, lambda g: globals()[vjp_name](g, xv, y))


def relu(x) -> Var:
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), "_vjp_relu")


def tanh(x) -> Var:
    return _unary("tanh", x, np.tanh, "_vjp_tanh")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Var:
    return _unary("sigmoid", x, _sigmoid, "_vjp_sigmoid")


def exp(x) -> Var:
    return _unary("exp", x, np.exp, "_vjp_exp")


def log(x) -> Var:
    """Natural log with the argument clamped at ``PROB_CLAMP``."""
    return _unary("log", x, lambda v: np.log(np.maximum(v, PROB_CLAMP)), "_vjp_log")


def abs_(x) -> Var:
    return _unary("abs", x, np.abs, "_vjp_abs")


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(logits) -> Var:
    """Softmax over the last axis of a rank-1 or rank-2 input."""
    tape = _tape_of(logits)
    logits = tape.lift(logits)
    if logits.ndim not in (1, 2):
        raise ShapeError("softmax", logits.shape, detail="expected rank 1 or 2")
    return _unary("softmax", logits, softmax_array, "_vjp_softmax")


def concat(a, b, axis: int = -1) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    try:
        out = np.concatenate([a.value, b.value], axis=axis)
    except ValueError:
        raise ShapeError("concat", a.shape, b.shape, detail=f"axis={axis}") from None
    split = a.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return tape.record("concat", (a, b), out, vjp)


def reshape(x, shape) -> Var:
    tape = _tape_of(x)
    x = tape.lift(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.value.size:
        raise ShapeError("reshape", x.shape, shape)
    old = x.shape
    return tape.record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))


def sum_(x, axis=None) -> Var:
    tape = _tape_of(x)
    x = tape.lift(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return tape.record("sum", (x,), np.asarray(np.sum(x.value, axis=axis)), vjp)


def mean(x, axis=None) -> Var:
    tape = _tape_of(x)
    x = tape.lift(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def l1_distance(a, b) -> Var:
    """Sum of absolute differences; subgradient 0 where ``a == b``."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", a.shape, b.shape)
    av, bv = a.value, b.value
    return tape.record("l1_distance", (a, b), np.asarray(np.abs(av - bv).sum()),
                       lambda g: _vjp_l1(g, av, bv))


def cross_entropy(probs, target) -> Var:
    """``-log(probs[target])``, averaged over rows for a batch.

    ``target`` is an int for a rank-1 ``probs`` or an int array for rank 2.
    """
    tape = _tape_of(probs)
    probs = tape.lift(probs)
    p = probs.value
    if p.ndim not in (1, 2):
        raise ShapeError("cross_entropy", p.shape, detail="expected rank 1 or 2")
    k = p.shape[-1]
    t = np.atleast_1d(np.asarray(target))
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"cross_entropy: target must be integer class indices, got {t.dtype}")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"cross_entropy: target class out of range [0, {k})")
    p2 = p.reshape(-1, k)
    if t.shape[0] != p2.shape[0]:
        raise ShapeError("cross_entropy", p.shape, t.shape, detail="one target per row")
    onehot = np.zeros_like(p2)
    onehot[np.arange(len(t)), t] = 1.0
    n = p2.shape[0]
    picked = p2[np.arange(n), t]
    value = -np.log(np.maximum(picked, PROB_CLAMP)).sum() / n
    onehot = onehot.reshape(p.shape)
    return tape.record("cross_entropy", (probs,), np.asarray(value),
                       lambda g: _vjp_cross_entropy(g, p, onehot, n))


def value_and_grad(f: Callable[[Var], Var], x) -> tuple[float, np.ndarray]:
    tape = Tape()
    xv = tape.variable(x)
    y = f(xv)
    return y.item(), tape.backward(y)[xv]


def evaluate(f: Callable[[Var], Var], x) -> float:
    tape = Tape()
    return f(tape.constant(np.asarray(x, dtype=np.float64))).item()


def grad_check(f: Callable[[Var], Var], x, eps: float = 1e-6) -> float:
    """Max relative error between backward and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` maps a Var to a scalar Var and must be smooth around ``x``.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = value_and_grad(f, x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate(f, x)
        flat[i] = orig - eps
        fm = evaluate(f, x)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    if x.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
