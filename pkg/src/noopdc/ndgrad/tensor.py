"""Tensor type and the reverse-mode graph machinery.

Every differentiable primitive creates a ``Node`` recording its inputs and a
closure that maps the output gradient to input gradients. ``backward`` builds
the topologically ordered ``Graph`` reachable from a scalar loss, visits each
node exactly once in reverse order and then consumes the graph.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()


class GraphError(RuntimeError):
    """Raised for invalid backward calls (non-scalar loss, consumed graph)."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Optional[BackwardFn]
    id: int = field(default_factory=lambda: next(_node_ids))
    consumed: bool = False


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._node: Optional[Node] = None

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        self.grad = np.zeros_like(self.data) if flag else None
        return self

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- operator sugar (implemented in functional) -------------------------
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        return F.div(self, other)

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result, recording a node when any input tracks gradients.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, tuple(inputs), backward_fn)
    return result


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a loss."""

    nodes: list
    tensors: list

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        # iterative post-order DFS; deep nets would overflow recursion
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(nodes=[t._node for t in order], tensors=order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss._node is None:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return
    graph = Graph.from_loss(loss)
    if any(n.consumed for n in graph.nodes):
        raise GraphError("graph already consumed by a previous backward")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        node = t._node
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = inp.grad + ig if inp.grad is not None else ig.copy()
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig
    for node in graph.nodes:
        node.consumed = True
        node.backward_fn = None
