"""Parameter containers and the small layers the decoder is built from."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping, Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor, get_default_dtype
from eanmap.errors import DimensionError
from eanmap.model.counter import current_counter

if TYPE_CHECKING:
    from numpy.typing import NDArray


class Module:
    """
    Base for anything that owns parameters.

    Parameters are the trainable Tensor attributes, found in assignment order;
    child modules (and lists of them) are walked recursively with dotted names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, NDArray[np.floating[Any]]]:
        return {name: np.array(p.data, copy=True) for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, NDArray[np.floating[Any]]]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise DimensionError(f"state is missing parameters: {sorted(missing)}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"{name}: stored {value.shape}, expected {param.shape}")
            data = value.astype(param.dtype, copy=True)
            data.setflags(write=False)
            param.data = data

    def bind_parameters(self, tensors: Mapping[str, Tensor]) -> None:
        """Swap in the given tensors under their dotted parameter names."""
        for name, tensor in tensors.items():
            *path, attr = name.split(".")
            owner: Any = self
            for part in path:
                owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
            if getattr(owner, attr).shape != tensor.shape:
                raise DimensionError(f"{name}: cannot bind {tensor.shape} over {getattr(owner, attr).shape}")
            setattr(owner, attr, tensor)

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.zero_grad()


def parameter(data: NDArray[np.floating[Any]]) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias over the last axis."""
    shaped = ops.reshape(bias, (1,) * (x.ndim - 1) + bias.shape)
    return ops.add(x, ops.expand(shaped, x.shape))


class Linear(Module):
    """y = x W + b with Xavier-uniform W and zero b."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero: bool = False,
    ) -> None:
        self.in_features = in_features
        self.out_features = out_features
        if zero:
            weight = np.zeros((in_features, out_features))
        else:
            limit = math.sqrt(6.0 / (in_features + out_features))
            weight = rng.uniform(-limit, limit, size=(in_features, out_features))
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last extent {self.in_features}, got {x.shape}")
        counter = current_counter()
        if counter is not None:
            rows = x.size // self.in_features
            counter.project(rows * self.in_features * self.out_features)
        y = ops.matmul(x, self.weight)
        return add_bias(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5) -> None:
        self.eps = eps
        self.gain = parameter(np.ones(features))
        self.shift = parameter(np.zeros(features))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.layer_norm_lastdim(x, self.eps)
        gain = ops.expand(ops.reshape(self.gain, (1,) * (x.ndim - 1) + self.gain.shape), x.shape)
        return add_bias(ops.mul(y, gain), self.shift)


class MLP(Module):
    """Linear layers with ReLU between them; optionally a zero-initialized last layer."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> None:
        self.layers = [
            Linear(d_in, d_out, rng, zero=zero_last and i == len(dims) - 2)
            for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:], strict=True))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x


def maybe_dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Dropout only when a training rng is supplied."""
    if rng is None or p <= 0.0:
        return x
    return ops.dropout(x, p, rng)
