"""Reverse-mode automatic differentiation over dense float64 matrices.

Every quantity is a 2-D array. Graphs are built on the fly (define-by-run)
and discarded after each training step; ``backward`` walks them in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

DIV_CLAMP = 1e-12


class DimensionError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    return a


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after scalar/row/column broadcasting."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a: Tuple[int, int], b: Tuple[int, int], op: str) -> Tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}")
    return tuple(out)


class Value:
    """A node in the computation graph: a matrix, its adjoint and how it was made."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_backward_done")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Value"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        self.data = as_matrix(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op
        self._backward_done = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Value":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op or 'leaf'})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def make_node(data: np.ndarray, parents: Sequence[Value], backward, op: str) -> Value:
    """Create an op output; the backward closure is only kept if some parent needs it."""
    needs = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs, parents=parents if needs else (),
                 backward=backward if needs else None, op=op)


def matmul(a, b) -> Value:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def _binary(a, b, op: str):
    a, b = lift(a), lift(b)
    _broadcast_shape(a.shape, b.shape, op)
    return a, b


def add(a, b) -> Value:
    a, b = _binary(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Value:
    a, b = _binary(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Value:
    a, b = _binary(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Value:
    a, b = _binary(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericDomainError("div: zero denominator")
    # Gradient uses a sign-preserving clamp on tiny denominators.
    den = np.where(np.abs(b.data) < DIV_CLAMP, np.copysign(DIV_CLAMP, b.data), b.data)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / den, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (den * den), b.shape))

    return make_node(out, (a, b), backward, "div")


def neg(a) -> Value:
    a = lift(a)

    def backward(g):
        a._accumulate(-g)

    return make_node(-a.data, (a,), backward, "neg")


def exp(a) -> Value:
    a = lift(a)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return make_node(out, (a,), backward, "exp")


def log(a) -> Value:
    a = lift(a)
    if np.any(a.data <= 0.0):
        raise NumericDomainError("ln: argument must be positive")

    def backward(g):
        a._accumulate(g / a.data)

    return make_node(np.log(a.data), (a,), backward, "ln")


def tanh(a) -> Value:
    a = lift(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return make_node(out, (a,), backward, "tanh")


def square(a) -> Value:
    a = lift(a)

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return make_node(a.data * a.data, (a,), backward, "square")


def softplus(a) -> Value:
    """ln(1 + e^x), computed without overflow; used for logit cross-entropies."""
    a = lift(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return make_node(out, (a,), backward, "softplus")


def clamp_min(a, floor: float) -> Value:
    a = lift(a)
    keep = a.data >= floor

    def backward(g):
        a._accumulate(np.where(keep, g, 0.0))

    return make_node(np.maximum(a.data, floor), (a,), backward, "clamp_min")


def transpose(a) -> Value:
    a = lift(a)

    def backward(g):
        a._accumulate(g.T)

    return make_node(a.data.T.copy(), (a,), backward, "transpose")


def take_cols(a, index: np.ndarray) -> Value:
    """Gather columns ``a[:, index]`` for a 1-D integer ``index``."""
    a = lift(a)
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), index), g)
        a._accumulate(full)

    return make_node(a.data[:, index], (a,), backward, "take_cols")


def vstack(parts: Sequence) -> Value:
    parts = [lift(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"vstack: column counts differ: {[p.shape for p in parts]}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=0)):
            if p.requires_grad:
                p._accumulate(gp)

    return make_node(np.vstack([p.data for p in parts]), parts, backward, "vstack")


def _axis(axis):
    if axis in (None, "all"):
        return None
    if axis in ("rows", 0):
        return 0
    if axis in ("cols", 1):
        return 1
    raise ValueError(f"unknown axis {axis!r}")


def reduce_sum(a, axis=None) -> Value:
    """Sum over everything (``None``/"all"), down rows (0/"rows") or across columns (1/"cols")."""
    a = lift(a)
    ax = _axis(axis)
    out = a.data.sum(axis=ax, keepdims=True)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_node(out, (a,), backward, "sum")


def reduce_mean(a, axis=None) -> Value:
    a = lift(a)
    ax = _axis(axis)
    count = a.data.size if ax is None else a.shape[ax]
    out = a.data.mean(axis=ax, keepdims=True)

    def backward(g):
        a._accumulate(np.broadcast_to(g / count, a.shape))

    return make_node(out, (a,), backward, "mean")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "ln": log,
    "tanh": tanh,
    "square": square,
    "neg": neg,
}


def elementwise(kind: str, *args) -> Value:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def topological_order(root: Value) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Populate ``grad`` on every node reachable from the scalar ``root``."""
    if root.shape != (1, 1):
        raise BackwardError(f"backward needs a 1x1 root, got {root.shape}")
    if root._backward_done:
        raise BackwardError("backward already ran on this graph; call zero_grad first")
    root._backward_done = True
    order = topological_order(root)
    root._accumulate(np.ones((1, 1)))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def check_finite(v: Value, name: str = "value") -> None:
    if not np.all(np.isfinite(v.data)):
        raise NumericDomainError(f"{name} contains NaN or Inf")


class ParameterStore:
    """Named trainable leaves. Positive quantities are kept as logarithms."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self._values: Dict[str, Value] = {}
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> Value:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        v = Value(np.array(as_matrix(arr), copy=True), requires_grad=True)
        self._values[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self) -> list:
        return list(self._values)

    def subset(self, prefix: str) -> "ParameterStore":
        """A view sharing the Values whose names start with ``prefix``."""
        sub = ParameterStore()
        sub._values = {k: v for k, v in self._values.items() if k.startswith(prefix)}
        return sub

    def exclude(self, prefix: str) -> "ParameterStore":
        sub = ParameterStore()
        sub._values = {k: v for k, v in self._values.items() if not k.startswith(prefix)}
        return sub

    def zero_grad(self) -> None:
        for v in self._values.values():
            v.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self._values.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._values.items()}

    def load(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            arr = as_matrix(arr)
            if arr.shape != self._values[k].shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {self._values[k].shape}")
            self._values[k].data = arr.copy()

    def count(self) -> int:
        return sum(v.data.size for v in self._values.values())


def grad_check(
    f: Callable[[ParameterStore], Value],
    params: ParameterStore,
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> float:
    """Max over entries of |analytic - central difference| / max(1, |central difference|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params.zero_grad()
    root = f(params)
    backward(root)
    analytic = params.grads()
    worst = 0.0
    for name in (names if names is not None else params.names()):
        v = params[name]
        base = v.data.copy()
        for idx in np.ndindex(*base.shape):
            v.data = base.copy()
            v.data[idx] += eps
            up = f(params).item()
            v.data = base.copy()
            v.data[idx] -= eps
            down = f(params).item()
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[name][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        v.data = base
    params.zero_grad()
    return worst
