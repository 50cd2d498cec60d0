"""
Tensor and graph tape for reverse-mode differentiation.

Every differentiable op appends its output to a per-thread tape at creation
time, so the tape is already in topological order. `backward` walks it in
reverse, hands each node its upstream gradient, and clears it.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.errors import ContractError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, DTypeLike, NDArray

BackwardFn = Callable[["NDArray[np.floating[Any]]"], Sequence["NDArray[np.floating[Any]] | None"]]


@dataclass
class Node:
    """A recorded operation: its inputs and the rule mapping out-grad to in-grads."""

    op: str
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.tape: list[Tensor] = []
        self.grad_enabled = True


_state = _TapeState()
_default_dtype: np.dtype[Any] = np.dtype(np.float64)


def set_default_dtype(dtype: DTypeLike) -> None:
    """Set the dtype new tensors get when none is given (float64 or float32)."""
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported tensor dtype {resolved}")
    _default_dtype = resolved


def get_default_dtype() -> np.dtype[Any]:
    return _default_dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def tape_length() -> int:
    """Number of operations recorded on this thread's tape."""
    return len(_state.tape)


def clear_tape() -> None:
    """Drop every recorded operation without computing gradients."""
    for tensor in _state.tape:
        tensor.node = None
    _state.tape.clear()


class Tensor:
    """
    n-dimensional float array that can take part in a differentiation graph.

    Data is immutable after construction; only `grad` changes, and only on
    leaves that require gradients.
    """

    __slots__ = ("data", "grad", "name", "node", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: DTypeLike | None = None,
        name: str | None = None,
    ) -> None:
        array = np.array(data, dtype=_default_dtype if dtype is None else dtype, copy=True)
        array.setflags(write=False)
        self.data: NDArray[np.floating[Any]] = array
        self.requires_grad = requires_grad
        self.grad: NDArray[np.floating[Any]] | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, array: NDArray[np.floating[Any]]) -> Tensor:
        """Adopt a freshly computed buffer without copying it."""
        out = cls.__new__(cls)
        array.setflags(write=False)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> NDArray[np.floating[Any]]:
        """Read-only view of the underlying buffer."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """Same values, outside the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: NDArray[np.floating[Any]]) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match tensor {self.shape}")
        self.grad = grad.astype(self.dtype, copy=True) if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar; the rules live in eanmap.autodiff.ops
    def __add__(self, other: Tensor | float) -> Tensor:
        from eanmap.autodiff import ops

        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        from eanmap.autodiff import ops

        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other: float) -> Tensor:
        from eanmap.autodiff import ops

        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from eanmap.autodiff import ops

        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        from eanmap.autodiff import ops

        return ops.scale(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        from eanmap.autodiff import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        from eanmap.autodiff import ops

        return ops.matmul(self, other)


def as_tensor(value: Tensor | ArrayLike, dtype: DTypeLike | None = None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(
    data: NDArray[np.floating[Any]],
    inputs: tuple[Tensor, ...],
    op: str,
    backward_fn: BackwardFn,
) -> Tensor:
    """Build an op output and record it when any input needs gradients."""
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op=op, inputs=inputs, backward=backward_fn)
        _state.tape.append(out)
    return out


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into every leaf that requires gradients.

    The tape is cleared afterwards; a second call needs a fresh forward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to the tape")

    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.accumulate_grad(seed)
        return

    pending: dict[int, NDArray[np.floating[Any]]] = {id(loss): seed}
    tape = _state.tape
    for tensor in reversed(tape):
        upstream = pending.pop(id(tensor), None)
        if upstream is None or tensor.node is None:
            continue
        input_grads = tensor.node.backward(upstream)
        for inp, grad in zip(tensor.node.inputs, input_grads, strict=True):
            if grad is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.accumulate_grad(grad)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + grad
            else:
                pending[id(inp)] = grad

    clear_tape()
