"""Dense tensor with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable kernel in
:mod:`glpnet.ops` builds its output through :func:`make_node`, which records
the parents and a closure mapping the output gradient to parent gradients.
Calling :meth:`Tensor.backward` on a scalar walks that record in reverse
topological order and accumulates into leaf gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (``float32``/``float64``)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; kernels live in glpnet.ops
    def __add__(self, other):
        from glpnet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from glpnet import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from glpnet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from glpnet import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from glpnet import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from glpnet import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from glpnet import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from glpnet import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from glpnet import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def __getitem__(self, key):
        from glpnet import ops
        return ops.index(self, key)

    def backward(self) -> None:
        """Differentiate this scalar w.r.t. every reachable leaf.

        Leaf gradients are accumulated (``+=``), never overwritten. The
        recorded tape is released afterwards, so a second call on the same
        graph sees only leaves.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
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
            node._parents = ()
            node._backward = None
            node.requires_grad = False


class Parameter(Tensor):
    """Trainable leaf with a dotted name and a zero-initialised gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.data = np.ascontiguousarray(self.data)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; record the tape entry when needed.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t
