"""Reverse-mode automatic differentiation on an append-only tape.

Every value produced by the crop model, the neural components and the hybrid
losses is recorded as a node on a :class:`Tape`.  A node stores its value, the
ids of its parents and the local partial derivative with respect to each
parent.  :func:`backward` then performs a single reverse sweep.

Node values are float64 numpy arrays.  A 0-d array is the scalar case; larger
shapes are used to run many site-years through the same program at once, with
numpy broadcasting between operands.  Elementwise partials are stored as
arrays, structural operations (matmul, sums, slicing) store a vector-Jacobian
closure instead.

Kinks (relu, min_const, max_const) use the subgradient 0 at the kink itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DomainError",
    "Tape",
    "Variable",
    "Gradient",
    "record_leaf",
    "elementary",
    "backward",
    "grad_check",
    "GradCheckEntry",
    "GradCheckReport",
    "ELEMENTARY_KINDS",
    "softplus",
    "matmul",
    "linear",
    "vsum",
    "cumsum",
    "reshape",
    "vmean",
    "concat",
    "stack",
    "minimum",
    "clamp",
    "where_const",
]


class DomainError(ValueError):
    """An operation was asked to leave its mathematical domain."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Node:
    __slots__ = ("kind", "parents", "partials", "value")

    def __init__(self, kind, parents, partials, value):
        self.kind = kind
        self.parents = parents
        self.partials = partials
        self.value = value


class Tape:
    """Append-only record of operations, in topological order."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, kind: str, parents: tuple, partials: tuple, value) -> "Variable":
        value = _as_array(value)
        if not np.all(np.isfinite(value)):
            raise DomainError(
                f"non-finite result in node {len(self.nodes)} ({kind})"
            )
        self.nodes.append(_Node(kind, parents, partials, value))
        return Variable(self, len(self.nodes) - 1, value)

    def leaf(self, value) -> "Variable":
        return record_leaf(self, value)


class Variable:
    """Handle to one node on one tape."""

    __slots__ = ("tape", "node_id", "_value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray) -> None:
        self.tape = tape
        self.node_id = node_id
        self._value = value

    @property
    def value(self):
        v = self._value
        return float(v) if v.ndim == 0 else v

    @property
    def array(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple:
        return self._value.shape

    def __float__(self) -> float:
        return float(self._value)

    def __repr__(self) -> str:
        return f"Variable(id={self.node_id}, value={self._value!r})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if isinstance(exponent, Variable):
            raise TypeError("only constant exponents are supported")
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return index(self, key)

    def exp(self):
        return exp(self)

    def ln(self):
        return ln(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def record_leaf(tape: Tape, value) -> Variable:
    """Record an input with no parents."""
    value = _as_array(value).copy()
    if not np.all(np.isfinite(value)):
        raise DomainError(f"leaf value must be finite, got {value!r}")
    return tape._record("leaf", (), (), value)


def _val(x):
    return x._value if isinstance(x, Variable) else _as_array(x)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Variable):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Variable")
    return tape


def _binary(kind: str, a, b, value, da, db):
    if not (isinstance(a, Variable) or isinstance(b, Variable)):
        value = _as_array(value)
        if not np.all(np.isfinite(value)):
            raise DomainError(f"non-finite result in constant {kind}")
        return value
    tape = _tape_of(a, b)
    parents, partials = [], []
    if isinstance(a, Variable):
        parents.append(a.node_id)
        partials.append(da)
    if isinstance(b, Variable):
        parents.append(b.node_id)
        partials.append(db)
    return tape._record(kind, tuple(parents), tuple(partials), value)


def _unary(kind: str, x, value, d):
    if not isinstance(x, Variable):
        value = _as_array(value)
        if not np.all(np.isfinite(value)):
            raise DomainError(f"non-finite result in constant {kind}")
        return value
    return x.tape._record(kind, (x.node_id,), (d,), value)


# Partials encoded as None mean "identity"; floats are constant multipliers.

def add(a, b) -> Variable:
    return _binary("add", a, b, _val(a) + _val(b), None, None)


def sub(a, b) -> Variable:
    return _binary("sub", a, b, _val(a) - _val(b), None, -1.0)


def mul(a, b) -> Variable:
    va, vb = _val(a), _val(b)
    return _binary("mul", a, b, va * vb, vb, va)


def div(a, b) -> Variable:
    va, vb = _val(a), _val(b)
    if np.any(vb == 0.0):
        where = "constant" if not (isinstance(a, Variable) or isinstance(b, Variable)) else f"node {len(_tape_of(a, b))}"
        raise DomainError(f"division by zero in {where} (div)")
    inv = 1.0 / vb
    out = va * inv
    return _binary("div", a, b, out, inv, -out * inv)


def exp(x: Variable) -> Variable:
    with np.errstate(over="ignore"):
        v = np.exp(_val(x))
    return _unary("exp", x, v, v)


def ln(x: Variable) -> Variable:
    v = _val(x)
    if np.any(v <= 0.0):
        where = f"node {len(x.tape)} (parent {x.node_id})" if isinstance(x, Variable) else "constant"
        raise DomainError(f"ln of non-positive argument in {where}")
    return _unary("ln", x, np.log(v), 1.0 / v)


def tanh(x: Variable) -> Variable:
    v = np.tanh(_val(x))
    return _unary("tanh", x, v, 1.0 - v * v)


def sigmoid(x: Variable) -> Variable:
    v = expit(_val(x))
    return _unary("sigmoid", x, v, v * (1.0 - v))


def relu(x: Variable) -> Variable:
    v = _val(x)
    mask = (v > 0.0).astype(np.float64)
    return _unary("relu", x, v * mask, mask)


def pow_const(x: Variable, p: float) -> Variable:
    v = _val(x)
    if np.any(v < 0.0) and float(p) != int(p):
        raise DomainError(f"fractional power of negative base (pow_const {p})")
    if p < 1 and np.any(v == 0.0):
        raise DomainError(f"pow_const({p}) at zero")
    return _unary("pow_const", x, v**p, p * v ** (p - 1))


def max_const(x: Variable, c: float) -> Variable:
    """max(x, c); the partial is 1 only where x is strictly above c."""
    v = _val(x)
    mask = v > c
    return _unary("max_const", x, np.where(mask, v, c), mask.astype(np.float64))


def min_const(x: Variable, c: float) -> Variable:
    v = _val(x)
    mask = v < c
    return _unary("min_const", x, np.where(mask, v, c), mask.astype(np.float64))


def softplus(x: Variable, beta: float = 1.0) -> Variable:
    """log(1 + exp(beta x)) / beta, evaluated without overflow."""
    z = beta * _val(x)
    v = np.logaddexp(0.0, z) / beta
    return _unary("softplus", x, v, expit(z))


_UNARY = {
    "exp": exp,
    "ln": ln,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_WITH_CONST = {"pow_const": pow_const, "min_const": min_const, "max_const": max_const}
ELEMENTARY_KINDS = tuple(_BINARY) + tuple(_UNARY) + tuple(_WITH_CONST)


def elementary(tape: Tape, kind: str, parents: Sequence, const: float | None = None) -> Variable:
    """Record one primitive by name.

    ``parents`` holds Variables (or plain numbers for binary kinds).  The
    ``*_const`` kinds take their constant through ``const``.
    """
    for p in parents:
        if isinstance(p, Variable) and p.tape is not tape:
            raise ValueError(f"parent node {p.node_id} is not on this tape")
    if kind in _BINARY:
        if len(parents) != 2:
            raise ValueError(f"{kind} takes two parents, got {len(parents)}")
        return _BINARY[kind](*parents)
    if kind in _UNARY:
        if len(parents) != 1:
            raise ValueError(f"{kind} takes one parent, got {len(parents)}")
        return _UNARY[kind](parents[0])
    if kind in _WITH_CONST:
        if len(parents) != 1 or const is None:
            raise ValueError(f"{kind} takes one parent and a constant")
        return _WITH_CONST[kind](parents[0], const)
    raise ValueError(f"unknown elementary kind {kind!r}")


# ---------------------------------------------------------------- structural

def matmul(x, w) -> Variable:
    """``x @ w`` for x of shape (..., n) and a 2-d w of shape (n, m)."""
    vx, vw = _val(x), _val(w)
    out = vx @ vw

    def dx(g):
        return g @ vw.T

    def dw(g):
        return np.tensordot(vx, g, axes=(tuple(range(vx.ndim - 1)), tuple(range(g.ndim - 1))))

    return _binary("matmul", x, w, out, dx, dw)


def linear(x, w, b=None) -> Variable:
    """Affine map ``x @ w.T + b`` with w of shape (out, in); batch axes lead."""
    vx, vw = _val(x), _val(w)
    out = vx @ vw.T
    if b is not None:
        out = out + _val(b)
    batch_axes = tuple(range(vx.ndim - 1))
    parents, partials = [], []
    for var, vjp in (
        (x, lambda g: g @ vw),
        (w, lambda g: np.tensordot(g, vx, axes=(batch_axes, batch_axes))),
        (b, lambda g: g.sum(axis=batch_axes) if batch_axes else g),
    ):
        if isinstance(var, Variable):
            parents.append(var.node_id)
            partials.append(vjp)
    if not parents:
        return out
    tape = _tape_of(x, w, *(() if b is None else (b,)))
    return tape._record("linear", tuple(parents), tuple(partials), out)


def vsum(x: Variable, axis=None) -> Variable:
    shape = _val(x).shape

    def d(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary("sum", x, _val(x).sum(axis=axis), d)


def vmean(x: Variable, axis=None) -> Variable:
    v = _val(x)
    n = v.size if axis is None else v.shape[axis]
    return vsum(x, axis) * (1.0 / n)


def cumsum(x: Variable, axis: int = -1) -> Variable:
    def d(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _unary("cumsum", x, np.cumsum(_val(x), axis=axis), d)


def reshape(x: Variable, shape: tuple) -> Variable:
    old = _val(x).shape
    return _unary("reshape", x, _val(x).reshape(shape), lambda g: np.reshape(g, old))


def index(x: Variable, key) -> Variable:
    shape = _val(x).shape

    def d(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    return _unary("index", x, _val(x)[key], d)


def concat(xs: Sequence, axis: int = -1) -> Variable:
    vals = [_val(x) for x in xs]
    if not any(isinstance(x, Variable) for x in xs):
        return np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)
    parents, partials = [], []
    for i, x in enumerate(xs):
        if isinstance(x, Variable):
            lo, hi = bounds[i], bounds[i + 1]
            parents.append(x.node_id)
            partials.append(lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
    return tape._record("concat", tuple(parents), tuple(partials), np.concatenate(vals, axis=axis))


def stack(xs: Sequence, axis: int = -1) -> Variable:
    vals = [_val(x) for x in xs]
    if not any(isinstance(x, Variable) for x in xs):
        return np.stack(vals, axis=axis)
    tape = _tape_of(*xs)
    out = np.stack(vals, axis=axis)
    parents, partials = [], []
    for i, x in enumerate(xs):
        if isinstance(x, Variable):
            parents.append(x.node_id)
            partials.append(lambda g, i=i: np.take(g, i, axis=axis))
    return tape._record("stack", tuple(parents), tuple(partials), out)


def minimum(a, b) -> Variable:
    """Elementwise min of two operands; ties send the gradient to ``a``."""
    va, vb = _val(a), _val(b)
    pick_a = (va <= vb).astype(np.float64)
    return _binary("minimum", a, b, np.minimum(va, vb), pick_a, 1.0 - pick_a)


def clamp(x: Variable, lo: float, hi: float) -> Variable:
    return min_const(max_const(x, lo), hi)


def where_const(mask, a, b) -> Variable:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    m = np.asarray(mask, dtype=np.float64)
    return _binary("where", a, b, np.where(m > 0, _val(a), _val(b)), m, 1.0 - m)


# ---------------------------------------------------------------- backward

class Gradient:
    """Adjoints of every node with respect to one seed output."""

    def __init__(self, tape: Tape, adjoints: list) -> None:
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, var: Variable):
        if var.tape is not self._tape:
            raise ValueError("variable is not on the differentiated tape")
        a = self._adj[var.node_id] if var.node_id < len(self._adj) else None
        if a is None:
            a = np.zeros(var.shape)
        return float(a) if np.ndim(a) == 0 else np.asarray(a)

    @property
    def adjoints(self) -> dict[int, np.ndarray]:
        out = {}
        for i, node in enumerate(self._tape.nodes):
            a = self._adj[i] if i < len(self._adj) else None
            out[i] = np.zeros(node.value.shape) if a is None else np.asarray(a)
        return out


def backward(tape: Tape, output: Variable) -> Gradient:
    """Single reverse sweep from ``output``; a non-scalar output is seeded with ones."""
    if not isinstance(output, Variable) or output.tape is not tape:
        raise ValueError("output is not on this tape")
    nodes = tape.nodes
    n = output.node_id + 1
    adj: list = [None] * n
    adj[output.node_id] = np.ones(output.shape)
    for i in range(n - 1, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        for p, partial in zip(node.parents, node.partials):
            if partial is None:
                c = g
            elif callable(partial):
                c = partial(g)
            else:
                c = g * partial
            pshape = nodes[p].value.shape
            if np.shape(c) != pshape:
                c = _unbroadcast(np.asarray(c), pshape)
            prev = adj[p]
            adj[p] = c if prev is None else prev + c
    return Gradient(tape, adj)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckEntry:
    input_name: str
    analytic: float
    numeric: float
    rel_error: float
    passed: bool
    error: str | None = None

    def to_dict(self) -> dict:
        d = {
            "input_name": self.input_name,
            "analytic": self.analytic,
            "numeric": self.numeric,
            "rel_error": self.rel_error,
            "pass": self.passed,
        }
        if self.error is not None:
            d["error"] = self.error
        return d


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=2)


def _entry_names(name: str, shape: tuple) -> list[tuple[str, tuple]]:
    if shape == ():
        return [(name, ())]
    return [(f"{name}[{','.join(map(str, idx))}]", idx) for idx in np.ndindex(*shape)]


def grad_check(
    program: Callable[[Tape, dict[str, Variable]], Variable],
    point: Mapping[str, float | np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-5,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``program(tape, inputs)`` must return a scalar Variable.  Each scalar
    input element x is perturbed by ``h = step * max(1, |x|)``.  The relative
    error is ``|analytic - numeric| / |analytic|``, falling back to the
    absolute error when ``|analytic| < 1e-8``.  ``names`` restricts the check
    to a subset of inputs.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: _as_array(v).copy() for k, v in point.items()}

    def evaluate(values):
        tape = Tape()
        inputs = {k: record_leaf(tape, v) for k, v in values.items()}
        out = program(tape, inputs)
        return tape, inputs, out

    report = GradCheckReport(tolerance=tolerance)
    tape, inputs, out = evaluate(base)
    if np.size(out.array) != 1:
        raise ValueError("grad_check needs a scalar program output")
    grads = backward(tape, out)
    selected = list(base) if names is None else list(names)
    for name in selected:
        g = np.asarray(grads[inputs[name]], dtype=np.float64).reshape(base[name].shape)
        for label, idx in _entry_names(name, base[name].shape):
            analytic = float(g[idx])
            x0 = float(base[name][idx])
            h = step * max(1.0, abs(x0))
            try:
                fs = []
                for sign in (1.0, -1.0):
                    moved = {k: v.copy() for k, v in base.items()}
                    moved[name][idx] = x0 + sign * h
                    fs.append(float(evaluate(moved)[2].array))
                numeric = (fs[0] - fs[1]) / (2.0 * h)
            except DomainError as exc:
                report.entries.append(
                    GradCheckEntry(label, analytic, math.nan, math.inf, False, str(exc))
                )
                continue
            diff = abs(analytic - numeric)
            rel = diff if abs(analytic) < 1e-8 else diff / abs(analytic)
            report.entries.append(
                GradCheckEntry(label, analytic, numeric, rel, bool(rel <= tolerance))
            )
    return report
