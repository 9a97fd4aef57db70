"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Graphs are built on the fly: every op that touches a tensor requiring
gradients records its inputs and a backward rule. Nodes carry a global
insertion counter, so sorting the nodes reachable from a loss by that
counter gives a topological order, and ``backward`` walks it in reverse.

Leaf gradients accumulate across ``backward`` calls; call ``zero_grad``
(or ``Tensor.zero_grad``) to reset them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NumericError,
)

NORM_EPS = 1e-12

_counter = itertools.count()
_debug = False
_faults: set[str] = set()


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


def inject_fault(op: str | None) -> None:
    """Test hook: corrupt the backward rule of ``op`` (None clears all)."""
    if op is None:
        _faults.clear()
    else:
        _faults.add(op)


def _as_2d(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array that can take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_2d(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_counter)

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out._op = op
        out._id = next(_counter)
        if _debug and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite output from op '{op}'")
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: list[int]
    output: Tensor


@dataclass
class Graph:
    """Ops reachable from an output, in insertion (= topological) order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        ordered = sorted(seen.values(), key=lambda t: t._id)
        return cls([Node(t._op, [p._id for p in t._parents], t) for t in ordered])

    def leaves(self) -> list[Tensor]:
        return [n.output for n in self.nodes if n.output.is_leaf]


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones((1, 1))}
    for node in reversed(graph.nodes):
        t = node.output
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array([[g.sum()]])


def _scale(op: str) -> float:
    return 1.1 if op in _faults else 1.0


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")

    def bw(g):
        s = _scale("matmul")
        return s * (g @ b.data.T), a.data.T @ g

    return Tensor._result(a.data @ b.data, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return Tensor._result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "mul")

    def bw(g):
        s = _scale("mul")
        return s * _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, "mul", (a, b), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of an m x n tensor."""
    if row.rows != 1 or row.cols != a.cols:
        raise DimensionError(f"add_row: cannot add {row.shape} row to {a.shape}")

    def bw(g):
        return g, g.sum(axis=0, keepdims=True)

    return Tensor._result(a.data + row.data, "add_row", (a, row), bw)


def repeat_rows(row: Tensor, n: int) -> Tensor:
    """Stack a 1 x d row ``n`` times."""
    if row.rows != 1:
        raise DimensionError(f"repeat_rows: expected a 1 x d row, got {row.shape}")
    return Tensor._result(np.repeat(row.data, n, axis=0), "repeat_rows", (row,),
                          lambda g: (g.sum(axis=0, keepdims=True),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,),
                          lambda g: (_scale("relu") * g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._result(s, "sigmoid", (a,), lambda g: (_scale("sigmoid") * g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    return Tensor._result(_softplus(a.data), "softplus", (a,),
                          lambda g: (_scale("softplus") * g * _sigmoid(a.data),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    return Tensor._result(np.log(a.data), "log", (a,), lambda g: (_scale("log") * g / a.data,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._result(e, "exp", (a,), lambda g: (_scale("exp") * g * e,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.cols
    return Tensor._result(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b),
                          lambda g: (g[:, :p], g[:, p:]))


def l2_normalize_rows(a: Tensor) -> Tensor:
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    if np.any(norms < NORM_EPS):
        raise DegenerateInputError("l2_normalize_rows: a row has (near) zero norm")
    y = a.data / norms

    def bw(g):
        # d(x/|x|) = (g - y <y, g>) / |x|
        dot = np.sum(g * y, axis=1, keepdims=True)
        return (_scale("l2_normalize_rows") * (g - y * dot) / norms,)

    return Tensor._result(y, "l2_normalize_rows", (a,), bw)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.array([[a.data.sum()]]), "reduce_sum", (a,),
                          lambda g: (np.full(shape, g[0, 0]),))


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return Tensor._result(np.array([[a.data.sum() / n]]), "reduce_mean", (a,),
                          lambda g: (np.full(shape, g[0, 0] / n),))


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    failures: list[tuple[int, tuple[int, int], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call. Each
    coordinate of each parameter is perturbed in place and restored.
    Failures list ``(param_index, coordinate, analytic, numeric)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("check_gradients: f is not finite at the base point")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(0.0, 0, tol)
    for pi, p in enumerate(params):
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = f().item()
            p.data[idx] = orig - eps
            f_minus = f().item()
            p.data[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"check_gradients: f not finite near param {pi}{idx}")
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[pi][idx])
            err = relative_error(a, numeric)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tol:
                report.failures.append((pi, idx, a, numeric))
    for p in params:
        p.zero_grad()
    return report
