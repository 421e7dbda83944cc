"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every operation in
:mod:`purelab.ops` records its inputs and a backward closure on the output
tensor; the resulting op graph is the tape. ``Tensor.backward()``
topologically sorts the graph and runs each closure exactly once, so a
single pass fills ``grad`` for every reachable leaf with
``requires_grad=True``.

Values are float32 by default; :func:`set_default_dtype` flips the library
into float64 for gradient verification. Non-finite op outputs raise
immediately (:class:`NumericsError`) instead of propagating silently.

Tensors are immutable once produced by an op, and a graph is owned by the
single run that built it; nothing here is shared across threads.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

_DEFAULT_DTYPE = np.float32


class NumericsError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (float32/float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _op: str = "leaf",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward pass ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``seed`` defaults to 1 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    "backward() without a seed requires a scalar output; "
                    f"got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError("backward seed shape mismatch")

        order = _toposort(self)
        self._accumulate(seed)
        for node in reversed(order):
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)

    # -- operator sugar (thin veneer over purelab.ops) ----------------------

    def __add__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.sadd(self, float(other))
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.sadd(self, -float(other))
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.smul(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.smul(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.smul(self, 1.0 / float(other))
        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        return ops.reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order walk; every node appears after all its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by op '{op}'")


def make_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    op: str,
    backward: Optional[Callable[[np.ndarray], None]],
) -> Tensor:
    """Wrap an op's forward result, attaching the backward closure.

    The finite-value invariant is enforced here so every registered op
    gets it for free.
    """
    check_finite(data, op)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward_fn = backward
    return out
