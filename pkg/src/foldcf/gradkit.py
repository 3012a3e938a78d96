"""A small reverse-mode autodiff tape over dense numpy arrays, plus Adam.

Every operation appends one node to its tape holding the parent indices and a
vector-Jacobian product closure. ``backward`` walks the tape once in reverse.

Broadcasting is limited to scalar-with-tensor; anything else must match shape
exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TapeError(ValueError):
    pass


class NonFiniteError(TapeError, FloatingPointError):
    pass


@dataclass
class _Node:
    parents: tuple
    vjp: Callable | None  # g -> tuple of parent cotangents


class Tape:
    def __init__(self):
        self.nodes: list = []
        self.params: list = []

    def _push(self, value, parents=(), vjp=None) -> "Var":
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced (node {len(self.nodes)})")
        self.nodes.append(_Node(tuple(parents), vjp))
        return Var(value, self, len(self.nodes) - 1)

    def param(self, value) -> "Var":
        """A leaf whose gradient ``backward`` reports."""
        v = self._push(np.array(value, dtype=float))
        self.params.append(v)
        return v

    def const(self, value) -> "Var":
        return self._push(np.array(value, dtype=float))

    def custom(self, value, parents: Sequence["Var"], vjp: Callable) -> "Var":
        """Record an externally computed op; ``vjp(g)`` returns one cotangent per parent."""
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands belong to different tapes")
        return self._push(value, [p.index for p in parents], vjp)


class Var:
    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var({self.value!r}, node={self.index})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return mul(self, -1.0)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands belong to different tapes")
    if tape is None:
        raise TapeError("at least one operand must be a Var")
    return tape


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g, shape):
    # reduce a cotangent back to a scalar operand
    if shape == ():
        return np.asarray(np.sum(g))
    return g


def _check_shapes(a: Var, b: Var, op: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise TapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary(a, b, op, fwd, da, db):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_shapes(a, b, op)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = fwd(av, bv)  # non-finite results are rejected by _push

    def vjp(g):
        return (_unbroadcast(da(g, av, bv, out), av.shape),
                _unbroadcast(db(g, av, bv, out), bv.shape))
    return tape._push(out, (a.index, b.index), vjp)


def add(a, b) -> Var:
    return _binary(a, b, "add", np.add,
                   lambda g, x, y, o: g * np.ones_like(o),
                   lambda g, x, y, o: g * np.ones_like(o))


def sub(a, b) -> Var:
    return _binary(a, b, "sub", np.subtract,
                   lambda g, x, y, o: g * np.ones_like(o),
                   lambda g, x, y, o: -g * np.ones_like(o))


def mul(a, b) -> Var:
    return _binary(a, b, "mul", np.multiply,
                   lambda g, x, y, o: g * y,
                   lambda g, x, y, o: g * x)


def div(a, b) -> Var:
    return _binary(a, b, "div", np.divide,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def minimum(a, b) -> Var:
    # ties send the gradient to the first operand
    return _binary(a, b, "minimum", np.minimum,
                   lambda g, x, y, o: g * (x <= y),
                   lambda g, x, y, o: g * (x > y))


def maximum(a, b) -> Var:
    return _binary(a, b, "maximum", np.maximum,
                   lambda g, x, y, o: g * (x >= y),
                   lambda g, x, y, o: g * (x < y))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return tape._push(av @ bv, (a.index, b.index), lambda g: (g @ bv.T, av.T @ g))


def _unary(x: Var, fwd, deriv) -> Var:
    if not isinstance(x, Var):
        raise TapeError("unary op needs a Var operand")
    xv = x.value
    out = fwd(xv)
    return x.tape._push(out, (x.index,), lambda g: (g * deriv(xv, out),))


def exp(x: Var) -> Var:
    return _unary(x, np.exp, lambda v, o: o)


def sqrt(x: Var) -> Var:
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o)


def abs(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    # d|x|/dx at 0 is taken as 0
    return _unary(x, np.abs, lambda v, o: np.sign(v))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Var) -> Var:
    return _unary(x, lambda v: _sigmoid(np.atleast_1d(v)).reshape(v.shape),
                  lambda v, o: o * (1.0 - o))


def tanh(x: Var) -> Var:
    return _unary(x, np.tanh, lambda v, o: 1.0 - o * o)


def leaky_relu(x: Var, negative_slope: float = 0.1) -> Var:
    """max(0, x) + negative_slope * min(0, x); the derivative at 0 is the slope."""
    return _unary(x,
                  lambda v: np.maximum(v, 0.0) + negative_slope * np.minimum(v, 0.0),
                  lambda v, o: np.where(v > 0, 1.0, negative_slope))


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001
    xv = x.value
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)
    return x.tape._push(out, (x.index,), vjp)


def mean(x: Var, axis: int | None = None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape._push(x.value.reshape(shape), (x.index,), lambda g: (np.reshape(g, old),))


def backward(loss: Var) -> dict:
    """Gradients of a scalar ``loss`` for every ``Tape.param`` leaf.

    Returns ``{param Var: ndarray}``; params the loss does not depend on get
    zeros.
    """
    if loss.value.shape != ():
        raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    grads: dict = {loss.index: np.asarray(1.0)}
    for i in range(loss.index, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            continue
        del grads[i]  # interior cotangents are not needed again
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return {p: np.broadcast_to(grads.get(p.index, np.zeros(p.shape)), p.shape).astype(float)
            for p in tape.params}


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState | None = None, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if state is None or not state.m:
        state = AdamState([np.zeros_like(p, dtype=float) for p in params],
                          [np.zeros_like(p, dtype=float) for p in params], state.t if state else 0)
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and state disagree in length")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)
