"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.errors import DimensionError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

    from eanmap.autodiff.tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus the step count."""

    step: int = 0
    m: dict[str, NDArray[np.floating[Any]]] = field(default_factory=dict)
    v: dict[str, NDArray[np.floating[Any]]] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, NDArray[np.floating[Any]] | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """
    Apply one AdamW update in place of each parameter's data.

    Parameters without a gradient are treated as having a zero gradient, so
    their moments still decay and weight decay still applies.
    """
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise DimensionError(f"grad for {name} has shape {grad.shape}, param {param.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        elif m.shape != param.shape or v.shape != param.shape:
            raise DimensionError(f"optimizer state for {name} does not match {param.shape}")

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v

        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        new = param.data * (1.0 - lr * weight_decay) - lr * update
        new = new.astype(param.dtype, copy=False)
        new.setflags(write=False)
        param.data = new


class AdamW:
    """Stateful wrapper that reads gradients off the parameters themselves."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        adamw_step(
            self.params,
            {name: p.grad for name, p in self.params.items()},
            self.state,
            lr=self.lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()
