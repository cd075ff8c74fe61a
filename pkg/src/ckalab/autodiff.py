"""Reverse-mode automatic differentiation over dense matrix operations.

A Tape records every operation of a forward pass as an append-only list of
nodes (so parents always precede consumers); backward walks the list in
reverse, accumulating adjoints. The op set covers exactly what the training
losses need: matmul, add, scalar multiply, elementwise multiply, transpose,
sum-all, squared Frobenius norm, sqrt, scalar divide, relu, log-softmax,
gram (X X^T) and gram centering.

Scalars are carried as 1x1 matrices. A Tape is single-owner while recording;
independent tapes can live on different threads.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import linalg as la
from .errors import DegenerateFeatureError, DimensionError

__all__ = [
    "Tape",
    "Var",
    "backward",
    "grad_check",
    "add",
    "matmul",
    "smul",
    "mul",
    "transpose",
    "sum_all",
    "frobenius_sq",
    "sqrt",
    "div",
    "relu",
    "log_softmax",
    "gram",
    "center_gram",
]

GUARD = 1e-30  # floor for denominators and radicands


class _Node:
    __slots__ = ("kind", "parents", "value", "aux")

    def __init__(self, kind, parents, value, aux=None):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.aux = aux


class Var:
    """Handle to one node of a Tape; shape is fixed at creation."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape.nodes[self.index].value.shape

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value) -> Var:
        """Record an input matrix (parameter or constant)."""
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise DimensionError(f"leaf: expected a 2-D value, got ndim={arr.ndim}")
        return self._record("leaf", (), arr)

    def scalar(self, value: float) -> Var:
        return self.leaf(np.array([[float(value)]]))

    def _record(self, kind, parent_vars, value, aux=None) -> Var:
        parents = tuple(p.index for p in parent_vars) if kind != "leaf" else ()
        for p in parent_vars:
            if p.tape is not self:
                raise ValueError(f"{kind}: operand recorded on a different tape")
        self.nodes.append(_Node(kind, parents, value, aux))
        return Var(self, len(self.nodes) - 1)


def _same_shape(kind, a: Var, b: Var):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a: Var, b: Var) -> Var:
    _same_shape("add", a, b)
    return a.tape._record("add", (a, b), a.value + b.value)


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    return a.tape._record("matmul", (a, b), la.matmul(a.value, b.value))


def smul(a: Var, c: float) -> Var:
    """Multiply by a plain scalar constant."""
    c = float(c)
    return a.tape._record("smul", (a,), c * a.value, aux=c)


def mul(a: Var, b: Var) -> Var:
    _same_shape("mul", a, b)
    return a.tape._record("mul", (a, b), a.value * b.value)


def transpose(a: Var) -> Var:
    return a.tape._record("transpose", (a,), np.ascontiguousarray(a.value.T))


def sum_all(a: Var) -> Var:
    return a.tape._record("sum_all", (a,), np.array([[la.seq_sum(a.value)]]))


def frobenius_sq(a: Var) -> Var:
    return a.tape._record("frob_sq", (a,), np.array([[la.frobenius_norm_sq(a.value)]]))


def sqrt(a: Var) -> Var:
    if np.any(a.value < GUARD):
        raise DegenerateFeatureError(f"sqrt: radicand below {GUARD:g}")
    return a.tape._record("sqrt", (a,), np.sqrt(a.value))


def div(a: Var, s: Var) -> Var:
    """Divide by a scalar (1x1) Var."""
    if s.shape != (1, 1):
        raise DimensionError(f"div: divisor must be 1x1, got {s.shape}")
    if abs(float(s.value[0, 0])) < GUARD:
        raise DegenerateFeatureError(f"div: denominator below {GUARD:g}")
    return a.tape._record("div", (a, s), a.value / s.value[0, 0])


def relu(a: Var) -> Var:
    return a.tape._record("relu", (a,), np.maximum(a.value, 0.0))


def log_softmax(a: Var) -> Var:
    """Row-wise log softmax (numerically stable)."""
    x = a.value
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    out = x - m - np.log(z)
    return a.tape._record("log_softmax", (a,), out, aux=e / z)


def gram(a: Var) -> Var:
    return a.tape._record("gram", (a,), la.gram(a.value))


def center_gram(a: Var) -> Var:
    return a.tape._record("center_gram", (a,), la.center_gram(a.value))


def _acc(adjoints, idx, value):
    if adjoints[idx] is None:
        adjoints[idx] = value.copy() if isinstance(value, np.ndarray) else value
    else:
        adjoints[idx] = adjoints[idx] + value


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Adjoints of every leaf with respect to a scalar (1x1) output.

    Returns a dict keyed by leaf node index; leaves unreachable from the
    output get zero adjoints.
    """
    if output.tape is not tape:
        raise ValueError("backward: output belongs to a different tape")
    if output.shape != (1, 1):
        raise DimensionError(f"backward: output must be 1x1, got {output.shape}")
    nodes = tape.nodes
    adjoints: list[np.ndarray | None] = [None] * (output.index + 1)
    adjoints[output.index] = np.ones((1, 1))
    for idx in range(output.index, -1, -1):
        node = nodes[idx]
        g = adjoints[idx]
        if g is None or node.kind == "leaf":
            continue
        kind = node.kind
        if kind == "add":
            _acc(adjoints, node.parents[0], g)
            _acc(adjoints, node.parents[1], g)
        elif kind == "matmul":
            pa, pb = node.parents
            av, bv = nodes[pa].value, nodes[pb].value
            _acc(adjoints, pa, la.matmul(g, np.ascontiguousarray(bv.T)))
            _acc(adjoints, pb, la.matmul(np.ascontiguousarray(av.T), g))
        elif kind == "smul":
            _acc(adjoints, node.parents[0], node.aux * g)
        elif kind == "mul":
            pa, pb = node.parents
            _acc(adjoints, pa, nodes[pb].value * g)
            _acc(adjoints, pb, nodes[pa].value * g)
        elif kind == "transpose":
            _acc(adjoints, node.parents[0], np.ascontiguousarray(g.T))
        elif kind == "sum_all":
            p = node.parents[0]
            _acc(adjoints, p, np.full(nodes[p].value.shape, g[0, 0]))
        elif kind == "frob_sq":
            p = node.parents[0]
            _acc(adjoints, p, (2.0 * g[0, 0]) * nodes[p].value)
        elif kind == "sqrt":
            _acc(adjoints, node.parents[0], g / (2.0 * node.value))
        elif kind == "div":
            pa, ps = node.parents
            s = nodes[ps].value[0, 0]
            _acc(adjoints, pa, g / s)
            ds = -la.seq_sum(g * nodes[pa].value) / (s * s)
            _acc(adjoints, ps, np.array([[ds]]))
        elif kind == "relu":
            p = node.parents[0]
            _acc(adjoints, p, g * (nodes[p].value > 0.0))
        elif kind == "log_softmax":
            softmax = node.aux
            _acc(
                adjoints,
                node.parents[0],
                g - softmax * g.sum(axis=1, keepdims=True),
            )
        elif kind == "gram":
            p = node.parents[0]
            _acc(
                adjoints,
                p,
                la.matmul(np.ascontiguousarray(g + g.T), nodes[p].value),
            )
        elif kind == "center_gram":
            # H (dC) H: the centering map is its own adjoint (H symmetric)
            _acc(adjoints, node.parents[0], la.center_gram(np.ascontiguousarray(g)))
        else:  # pragma: no cover
            raise ValueError(f"backward: unknown op kind {kind!r}")
    out: dict[int, np.ndarray] = {}
    for idx, node in enumerate(nodes):
        if node.kind == "leaf":
            if idx <= output.index and adjoints[idx] is not None:
                out[idx] = adjoints[idx]
            else:
                out[idx] = np.zeros_like(node.value)
    return out


def grad_check(f: Callable[[Var], Var], x: np.ndarray, h: float) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar Var from a leaf Var; it is re-recorded on a fresh
    tape at every perturbed point. Error per entry is
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x = np.ascontiguousarray(x, dtype=np.float64)

    def value_at(point: np.ndarray) -> float:
        tape = Tape()
        out = f(tape.leaf(point))
        if out.shape != (1, 1):
            raise DimensionError("grad_check: f must return a 1x1 Var")
        v = float(out.value[0, 0])
        if not np.isfinite(v):
            raise ValueError("grad_check: f returned a non-finite value")
        return v

    tape = Tape()
    vx = tape.leaf(x)
    out = f(vx)
    if out.shape != (1, 1):
        raise DimensionError("grad_check: f must return a 1x1 Var")
    analytic = backward(tape, out)[vx.index]

    worst = 0.0
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        central = (value_at(xp) - value_at(xm)) / (2.0 * h)
        a = float(analytic[idx])
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
