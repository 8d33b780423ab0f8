"""Dense tensors with a dynamic reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` linearizes the recorded graph once (topological
order, cycle-checked) and walks it in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks on every op output and gradient."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """N-d array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap an op output and, when needed, record it on the tape.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    if _DEBUG:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# -- graph -------------------------------------------------------------------
@dataclass
class Graph:
    """Topologically ordered view of the tape reachable from one output."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError(f"cycle detected at {node.op} node")
            state[key] = 1
            stack.append((node, True))
            for parent in node._parents:
                pst = state.get(id(parent))
                if pst == 1:
                    raise GraphError(f"cycle detected at {parent.op} node")
                if pst is None:
                    stack.append((parent, False))
        return cls(output=output, nodes=order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(output: Tensor, grad=None, graph: Graph | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if grad is None:
        if output.data.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {output.shape}")
        grad = np.ones_like(output.data)
    else:
        grad = np.asarray(grad, dtype=output.dtype)
        if grad.shape != output.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {output.shape}")
    if not output.requires_grad:
        return
    graph = graph or Graph.trace(output)
    grads: dict[int, np.ndarray] = {id(output): grad}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                if _DEBUG:
                    _check_finite(g, "backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementary ops ------------------------------------------------------------
def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), grad_fn, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), grad_fn, "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data

    def grad_fn(g):
        return (g * exponent * ad ** (exponent - 1),)

    return make_result(ad**exponent, (a,), grad_fn, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")
