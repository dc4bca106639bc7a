"""
Dense float64 tensors with reverse-mode automatic differentiation.

A numpy backend holds the data; every differentiable operation records its
parents and a backward closure on the result. The tape is rebuilt on every
forward pass and discarded with the result. Node ids grow with creation, so
reverse creation order is a valid topological order for backpropagation.

Grad mode lives in a ``ContextVar``: threads started with
``asyncio.to_thread`` inherit the caller's mode without sharing state.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from core.errors import ContractError, DimensionError

Array = NDArray[np.float64]
Backward = Callable[[Array], None]
Operand = Union["Tensor", float, int]

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_node_ids = itertools.count()

GELU_COEF = float(np.sqrt(2.0 / np.pi))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, reference model)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False, name: str = "") -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    # -- construction -------------------------------------------------------

    @classmethod
    def _from_op(
        cls, data: Array, parents: tuple[Tensor, ...], backward: Backward, op: str
    ) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = op
        out.requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def parameter(cls, data: ArrayLike, name: str = "") -> Tensor:
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def constant(cls, data: ArrayLike, name: str = "") -> Tensor:
        return cls(data, requires_grad=False, name=name)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def _accumulate(self, grad: Array) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss was not produced by recorded operations on parameters")
        graph = Graph.trace(self)
        for node in graph.nodes:
            if not node.is_leaf:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other: Operand) -> Tensor:
        return add(self, _lift(other))

    def __radd__(self, other: Operand) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other: Operand) -> Tensor:
        return add(self, neg(_lift(other)))

    def __rsub__(self, other: Operand) -> Tensor:
        return add(_lift(other), neg(self))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __mul__(self, other: Operand) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: Operand) -> Tensor:
        return self.__mul__(other)

    def __truediv__(self, other: float | int) -> Tensor:
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)


def _lift(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.constant(float(value))


@dataclass(frozen=True)
class Graph:
    """Nodes reachable from a root, in creation order (a topological order)."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(node._parents)
        return cls([seen[k] for k in sorted(seen)])


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(
            f"{op}: cannot broadcast shapes {a.shape} and {b.shape}", left=a.shape, right=b.shape
        ) from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (covers broadcast-add)."""
    _check_broadcast("add", a, b)

    def _backward(grad: Array) -> None:
        a._accumulate(grad)
        b._accumulate(grad)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def neg(a: Tensor) -> Tensor:
    def _backward(grad: Array) -> None:
        a._accumulate(-grad)

    return Tensor._from_op(-a.data, (a,), _backward, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data

    def _backward(grad: Array) -> None:
        a._accumulate(grad * b_data)
        b._accumulate(grad * a_data)

    return Tensor._from_op(a_data * b_data, (a, b), _backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""

    def _backward(grad: Array) -> None:
        a._accumulate(grad * factor)

    return Tensor._from_op(a.data * factor, (a,), _backward, "scale")


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    For ``a`` [m,k] and ``b`` [k,n] this is the plain product, with
    dA = dC·Bᵀ and dB = Aᵀ·dC.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}",
            left=a.shape,
            right=b.shape,
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(
            f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}",
            left=a.shape,
            right=b.shape,
        ) from exc
    a_data, b_data = a.data, b.data

    def _backward(grad: Array) -> None:
        if a.requires_grad:
            a._accumulate(grad @ np.swapaxes(b_data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a_data, -1, -2) @ grad)

    return Tensor._from_op(a_data @ b_data, (a, b), _backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape

    def _backward(grad: Array) -> None:
        a._accumulate(grad.reshape(in_shape))

    return Tensor._from_op(a.data.reshape(tuple(shape)), (a,), _backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes; the backward applies the inverse permutation."""
    perm = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def _backward(grad: Array) -> None:
        a._accumulate(np.transpose(grad, inverse))

    return Tensor._from_op(np.transpose(a.data, perm), (a,), _backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    parts = tuple(tensors)
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in parts]}",
            shapes=[t.shape for t in parts],
        ) from exc

    def _backward(grad: Array) -> None:
        for part, piece in zip(parts, np.split(grad, splits, axis=axis), strict=True):
            part._accumulate(piece)

    return Tensor._from_op(data, parts, _backward, "concat")


def gather(a: Tensor, index: ArrayLike) -> Tensor:
    """Pick one entry of the last axis per leading position: out[...] = a[..., index[...]]."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(
            f"gather: index shape {idx.shape} does not match leading shape {a.shape[:-1]}",
            left=a.shape,
            right=idx.shape,
        )
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise DimensionError(f"gather: index out of range for last axis of size {a.shape[-1]}")
    expanded = idx[..., None]
    in_shape = a.shape

    def _backward(grad: Array) -> None:
        full = np.zeros(in_shape, dtype=np.float64)
        np.put_along_axis(full, expanded, grad[..., None], axis=-1)
        a._accumulate(full)

    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]
    return Tensor._from_op(out, (a,), _backward, "gather")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def _backward(grad: Array) -> None:
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        a._accumulate(np.broadcast_to(grad, in_shape))

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def tensor_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Nonlinearities and normalizations
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor) -> Tensor:
    """Stable log-softmax over the last axis (max subtraction)."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a last dimension >= 1, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _backward(grad: Array) -> None:
        a._accumulate(grad - np.exp(out) * grad.sum(axis=-1, keepdims=True))

    return Tensor._from_op(out, (a,), _backward, "log_softmax")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (attention weights)."""
    exps = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = exps / exps.sum(axis=-1, keepdims=True)

    def _backward(grad: Array) -> None:
        a._accumulate(out * (grad - (grad * out).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(out, (a,), _backward, "softmax")


def log_sigmoid(a: Tensor) -> Tensor:
    """log σ(x) = −softplus(−x), stable for large |x|."""
    x = a.data

    def _backward(grad: Array) -> None:
        a._accumulate(grad * np.exp(-np.logaddexp(0.0, x)))

    return Tensor._from_op(-np.logaddexp(0.0, -x), (a,), _backward, "log_sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def _backward(grad: Array) -> None:
        a._accumulate(grad * (1.0 - out * out))

    return Tensor._from_op(out, (a,), _backward, "tanh")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = GELU_COEF * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def _backward(grad: Array) -> None:
        d_inner = GELU_COEF * (1.0 + 3.0 * 0.044715 * x * x)
        a._accumulate(grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return Tensor._from_op(0.5 * x * (1.0 + t), (a,), _backward, "gelu")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match features of {a.shape}",
            left=a.shape,
            right=gain.shape,
        )
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    g_data = gain.data

    def _backward(grad: Array) -> None:
        gain._accumulate(grad * x_hat)
        bias._accumulate(grad)
        if a.requires_grad:
            d_hat = grad * g_data
            a._accumulate(
                inv_std
                * (
                    d_hat
                    - d_hat.mean(axis=-1, keepdims=True)
                    - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
                )
            )

    return Tensor._from_op(x_hat * g_data + bias.data, (a, gain, bias), _backward, "layer_norm")
