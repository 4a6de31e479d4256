"""Dense tensors with define-by-run reverse-mode differentiation.

Every array the model touches is a :class:`Tensor`: a numpy buffer plus an
optional tape entry (parents and a backward closure). Values are never
mutated once a tensor has been used as an operand; ops always allocate.
"""

import contextlib
import logging
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]


class StreamTrackerError(Exception):
    """Base class for every error raised by stream_tracker."""

    pass


class ShapeError(StreamTrackerError):
    """Dimension or geometry mismatch."""

    pass


class ContractError(StreamTrackerError):
    """A precondition of an operation was violated by the caller."""

    pass


class DomainError(StreamTrackerError):
    """Input values outside the domain an operation is defined on."""

    pass


_GRAD_STATE = threading.local()


def is_grad_enabled() -> bool:
    """Return False inside a :func:`no_grad` block (per thread)."""
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    """Coerce to a floating ndarray. Floating arrays keep their dtype unless one is given."""
    if isinstance(data, Tensor):
        data = data.data
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if not np.issubdtype(data.dtype, np.floating):
            return data.astype(np.float32)
        return data
    return np.asarray(data, dtype=dtype or np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Row-major dense array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap an op result; records a tape entry only if some parent is tracked."""
        out = cls(data)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        """The underlying buffer. Treat as read-only."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- reverse pass --------------------------------------------------

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            if node._released:
                raise ContractError("graph was already released by a previous backward(); detach state between passes")
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every tracked leaf.

        Leaves that already hold a gradient raise ContractError: call
        zero_grad() between passes. The graph is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise ContractError("graph was already released by a previous backward()")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tracked leaf")
        order = self._topological_order()
        for node in order:
            if node.is_leaf and node.grad is not None:
                raise ContractError("leaf gradient already populated; call zero_grad() before another backward()")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = np.array(grad, dtype=node.dtype, copy=True)
                continue
            parent_grads = node._backward(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if pgrad.shape != parent.shape:
                    pgrad = _unbroadcast(pgrad, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pgrad if key in grads else pgrad
            node._parents = ()
            node._backward = None
            node._released = True
        logger.debug("backward: %d nodes", len(order))

    # -- arithmetic ----------------------------------------------------

    def _coerce(self, other: Operand) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Operand) -> "Tensor":
        other = self._coerce(other)
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "Tensor":
        other = self._coerce(other)
        return Tensor.from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other: Operand) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other: Operand) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor.from_op(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return Tensor.from_op(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    # -- elementwise ---------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def sigmoid(self) -> "Tensor":
        out = np.exp(-np.logaddexp(0, -self.data)).astype(self.dtype, copy=False)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1 - out),), "sigmoid")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * (1 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor.from_op(np.where(mask, self.data, 0).astype(self.dtype, copy=False), (self,), lambda g: (g * mask,), "relu")

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor.from_op(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def clip(self, low: float, high: float) -> "Tensor":
        mask = (self.data >= low) & (self.data <= high)
        return Tensor.from_op(np.clip(self.data, low, high), (self,), lambda g: (g * mask,), "clip")

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor.from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g: np.ndarray):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(np.array(self.data[index]), (self,), backward, "getitem")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}") from e
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Elementwise select; `mask` is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    dtype = like.dtype if like is not None else np.float32
    ta = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=dtype))
    tb = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=dtype))
    data = np.where(mask, ta.data, tb.data)
    return Tensor.from_op(data, (ta, tb), lambda g: (np.where(mask, g, 0), np.where(mask, 0, g)), "where")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()
