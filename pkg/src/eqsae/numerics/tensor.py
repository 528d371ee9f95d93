"""Dense tensors with a small reverse-mode autodiff engine.

Every ``Tensor`` wraps a C-contiguous numpy array in one of two precisions.
Operations in :mod:`eqsae.numerics.ops` build a DAG of nodes; calling
:meth:`Tensor.backward` on a scalar walks it once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class PrecisionError(TypeError):
    """Operands of one graph were created in different precisions."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reuse, detached loss)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite scalars are required."""


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @classmethod
    def of(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.SINGLE
        if dtype == np.float64:
            return cls.DOUBLE
        raise PrecisionError(f"unsupported dtype {dtype}")


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False, precision: Precision | str | None = None):
        if isinstance(precision, str):
            precision = Precision(precision)
        arr = np.asarray(data)
        if precision is not None:
            dtype = precision.dtype
        elif arr.dtype in (np.float32, np.float64):
            dtype = arr.dtype
        else:
            dtype = np.dtype(np.float64)
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""
        self._spent = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, precision=self.precision)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision.value}{flag})"

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf that requires grad.

        Leaf gradients accumulate across graphs until reset with ``zero_grad``;
        a single graph can only be differentiated once.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        if self._spent:
            raise GraphError("backward() already called on this graph; rebuild the forward pass")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node._spent = True
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise GraphError(
                        f"{node._op}: gradient shape {pg.shape} != input shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        self._spent = True


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def common_precision(*tensors: Tensor) -> Precision:
    precisions = {t.precision for t in tensors}
    if len(precisions) != 1:
        names = sorted(p.value for p in precisions)
        raise PrecisionError(f"mixed precisions in one graph: {names}")
    return precisions.pop()


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._spent = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, precision: Precision | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, precision=precision)


def zeros(shape, precision: Precision = Precision.SINGLE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=precision.dtype), requires_grad=requires_grad)


def uniform_init(
    rng: np.random.Generator, shape, fan_in: int, precision: Precision = Precision.SINGLE
) -> Tensor:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(precision.dtype)
    return Tensor(data, requires_grad=True)
