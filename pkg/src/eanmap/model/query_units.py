"""
Grouped anchor query units.

Every group i and point j owns a central query: position P[j] + gp[i] and
content C[j] + gc[i]. The non-central twin uses the same content tensor and
only shifts the position, so both branches train the shared parts.

With `anchored=False` there are no P or gp parameters: each query's position
is predicted from its content by a linear layer and a sigmoid, the way plain
learned detection queries get their reference points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Literal

import numpy as np

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor
from eanmap.errors import ConfigError, ContractError
from eanmap.geometry import offset_to_normalized, square_neighborhood_offset
from eanmap.model.layers import Linear, Module, parameter

if TYPE_CHECKING:
    from numpy.typing import NDArray

PE_TEMPERATURE = 10000.0


def sine_pe(
    coords: NDArray[np.floating[Any]], dim: int, temperature: float = PE_TEMPERATURE
) -> NDArray[np.float64]:
    """
    Sine encoding of normalized (x, y) coordinates, shape (..., dim).

    Each axis gets dim / 2 features: interleaved sin/cos of 2*pi*coord at
    frequencies temperature^(-4i/dim). The x features come first.
    """
    if dim % 4 != 0:
        raise ConfigError(f"sine positional encoding needs dim divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64)
    quarter = dim // 4
    freqs = temperature ** (-4.0 * np.arange(quarter) / dim)
    parts = []
    for axis in range(2):
        phase = coords[..., axis, None] * (2.0 * math.pi) * freqs
        pair = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
        parts.append(pair.reshape(*coords.shape[:-1], 2 * quarter))
    return np.concatenate(parts, axis=-1)


@dataclass
class QueryAssembly:
    """Positions are constants per forward; content carries the graph."""

    central: Tensor  # M x N x 2
    content: Tensor  # M x N x n, shared by both branches
    noncentral: Tensor | None = None


class QueryUnits(Module):
    """Learnable anchors (P), content (C), and per-group embeddings (gp, gc)."""

    P: Tensor | None
    gp: Tensor | None

    def __init__(
        self,
        groups: int,
        n_points: int,
        dim: int,
        rng: np.random.Generator,
        anchored: bool = True,
    ) -> None:
        if groups < 1 or n_points < 1:
            raise ConfigError(f"need at least one group and point, got {groups} x {n_points}")
        if dim % 2 != 0:
            raise ConfigError(f"query dim must be even, got {dim}")
        self.groups = groups
        self.n_points = n_points
        self.dim = dim
        self.anchored = anchored
        self.P = parameter(rng.uniform(0.0, 1.0, size=(n_points, 2))) if anchored else None
        self.C = parameter(rng.normal(0.0, 0.02, size=(n_points, dim)))
        self.gp = parameter(np.zeros((groups, 2))) if anchored else None
        self.gc = parameter(rng.normal(0.0, 0.02, size=(groups, dim)))
        self.reference = None if anchored else Linear(dim, 2, rng)
        self._offsets: NDArray[np.float64] | None = None
        self._positions: NDArray[np.float64] | None = None

    @property
    def offsets(self) -> NDArray[np.float64] | None:
        return self._offsets

    def resample_noncentral(
        self,
        side_meters: float,
        rng: np.random.Generator,
        mode: Literal["neighborhood", "random"] = "neighborhood",
    ) -> None:
        """Draw fresh non-central placements for one training iteration."""
        shape = (self.groups, self.n_points)
        if mode == "neighborhood":
            meters = square_neighborhood_offset(side_meters, rng, size=shape)
            self._offsets = offset_to_normalized(meters)
            self._positions = None
        elif mode == "random":
            self._positions = rng.uniform(0.0, 1.0, size=(*shape, 2))
            self._offsets = None
        else:
            raise ConfigError(f"unknown non-central mode {mode!r}")

    def set_offsets(self, offsets: NDArray[np.floating[Any]]) -> None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (self.groups, self.n_points, 2):
            raise ContractError(f"offsets must be {(self.groups, self.n_points, 2)}, got {offsets.shape}")
        self._offsets = offsets
        self._positions = None

    def clear_noncentral(self) -> None:
        self._offsets = None
        self._positions = None

    def assemble(self, with_noncentral: bool = False) -> QueryAssembly:
        M, N, n = self.groups, self.n_points, self.dim
        content = ops.add(
            ops.expand(ops.reshape(self.C, (1, N, n)), (M, N, n)),
            ops.expand(ops.reshape(self.gc, (M, 1, n)), (M, N, n)),
        )
        if self.P is not None and self.gp is not None:
            central = ops.add(
                ops.expand(ops.reshape(self.P, (1, N, 2)), (M, N, 2)),
                ops.expand(ops.reshape(self.gp, (M, 1, 2)), (M, N, 2)),
            )
        elif self.reference is not None:
            central = ops.sigmoid(self.reference(content))
        else:
            raise ContractError("query units have neither anchors nor a reference head")
        if not with_noncentral:
            return QueryAssembly(central, content)

        if self._offsets is not None:
            noncentral = ops.add(central, Tensor(self._offsets, dtype=central.dtype))
        elif self._positions is not None:
            noncentral = Tensor(self._positions, dtype=central.dtype)
        else:
            raise ContractError("non-central placements were not resampled for this iteration")
        return QueryAssembly(central, content, noncentral)
