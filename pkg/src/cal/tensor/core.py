"""Dense float64 tensors with a reverse-mode gradient record."""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without building a gradient record (evaluation)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


_DEBUG = False


def set_debug(flag: bool) -> None:
    """When on, every primitive scans its output for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional double precision array that can take part in backprop.

    The data array is treated as immutable once constructed; only ``grad``
    changes, and only through :func:`backward` (which accumulates) or
    :meth:`zero_grad`.
    """

    __slots__ = ("_backward", "_op", "_parents", "data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # skips the defensive copy for arrays produced internally
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

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
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, as_tensor(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.elementwise_mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap a primitive's output and, if needed, hook it into the record."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class ComputationRecord:
    """Executed primitives in topological order, ending at the output."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS so deep graphs don't hit the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    @property
    def entries(self) -> list[Tensor]:
        """Non-leaf nodes, i.e. the primitive applications to replay."""
        return [n for n in self.nodes if not n.is_leaf]

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> ComputationRecord:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    record = ComputationRecord(loss)
    if not loss.requires_grad:
        return record
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
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
    return record
