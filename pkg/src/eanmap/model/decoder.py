"""
Detection head: query units through a stack of decoder layers.

Each layer runs self-attention over the queries, samples the BEV grid around
every anchor, applies a feed-forward block, and predicts a class per group
and a refined point per query. Refined points become the next layer's
anchors.

Anchor positions reach the sine encoding and the BEV sampling base as
constants: the only gradient path into P and gp is the refinement
`sigmoid(inverse_sigmoid(anchor) + delta)`. Between layers the refined points
are detached as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor, as_tensor
from eanmap.errors import ConfigError, ContractError, DimensionError, NumericFaultError
from eanmap.geometry import NUM_CLASSES
from eanmap.model.attention import GroupedLocalSelfAttention, VanillaBlock
from eanmap.model.layers import MLP, LayerNorm, Linear, Module, maybe_dropout, parameter
from eanmap.model.query_units import QueryUnits

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = structlog.get_logger()

ANCHOR_EPS = 1e-5


class DecoderConfig(BaseModel):
    """Model shape and the mechanism switches the ablations flip."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    sampling_points: int = 4
    num_classes: int = NUM_CLASSES
    n_points: int = 10
    groups: int = 25
    bev_channels: int = 16
    ffn_ratio: int = 4
    dropout: float = 0.0

    neighborhood_side: float = 0.5  # a, meters
    gt_omega: float = 0.2  # omega

    use_noncentral_branch: bool = True
    use_gt_neighborhood: bool = True
    use_improved_local_queries: bool = True
    use_local_queries: bool = True
    use_group_mean: bool = True
    self_attention: Literal["glsa", "vanilla"] = "glsa"
    query_type: Literal["anchor", "vanilla"] = "anchor"
    noncentral_mode: Literal["neighborhood", "random"] = "neighborhood"

    @model_validator(mode="after")
    def _check_dims(self) -> DecoderConfig:
        if self.embed_dim % 4 != 0:
            raise ConfigError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if min(self.layers, self.groups, self.n_points, self.sampling_points) < 1:
            raise ConfigError("layers, groups, n_points and sampling_points must be positive")
        if self.neighborhood_side <= 0.0:
            raise ConfigError("neighborhood_side must be positive")
        if not 0.0 <= self.gt_omega <= 1.0:
            raise ConfigError("gt_omega must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self


@dataclass
class DecoderHooks:
    """Test switches; the defaults are the real model."""

    zero_step2: bool = False
    refine_anchors: bool = True
    noncentral_offsets: NDArray[np.floating[Any]] | None = None
    # first-layer positions for the sine encoding and sampling, keyed by branch
    frozen_positions: dict[str, NDArray[np.floating[Any]]] | None = None


@dataclass
class LayerPrediction:
    class_logits: Tensor  # M x (K + 1)
    points: Tensor  # M x N x 2, normalized


@dataclass
class DetectionSet:
    layers: list[LayerPrediction] = field(default_factory=list)
    noncentral: list[LayerPrediction] | None = None

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


class BevSampler(Module):
    """
    Single-scale deformable-style sampling.

    Each query predicts S offsets (in grid cells) around its anchor and S
    weights; the sampled C-dim features are projected to n and mixed by the
    softmaxed weights.
    """

    def __init__(self, dim: int, channels: int, points: int, rng: np.random.Generator) -> None:
        self.points = points
        self.channels = channels
        self.offsets = Linear(dim, 2 * points, rng, zero=True)
        angles = 2.0 * np.pi * np.arange(points) / points
        self.offsets.bias = parameter(np.stack([np.cos(angles), np.sin(angles)], axis=-1).ravel())
        self.weights = Linear(dim, points, rng, zero=True)
        self.value = Linear(channels, dim, rng)

    def __call__(self, content: Tensor, anchors: NDArray[np.floating[Any]], bev: Tensor) -> Tensor:
        M, N, n = content.shape
        S = self.points
        _, height, width = bev.shape
        rows = M * N

        cells = ops.reshape(self.offsets(content), (rows, S, 2))
        per_cell = Tensor(np.array([1.0 / width, 1.0 / height]).reshape(1, 1, 2), dtype=content.dtype)
        shift = ops.mul(cells, ops.expand(per_cell, (rows, S, 2)))
        base = Tensor(np.broadcast_to(anchors.reshape(rows, 1, 2), (rows, S, 2)), dtype=content.dtype)
        locations = ops.reshape(ops.add(base, shift), (rows * S, 2))

        sampled = ops.bilinear_sample(bev, locations)  # rows*S x C
        projected = ops.reshape(self.value(sampled), (rows, S, n))
        mix = ops.softmax_lastdim(ops.reshape(self.weights(content), (rows, 1, S)))
        return ops.reshape(ops.matmul(mix, projected), (M, N, n))


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator) -> None:
        n = cfg.embed_dim
        self.dropout = cfg.dropout
        if cfg.self_attention == "glsa":
            self.attention: GroupedLocalSelfAttention | VanillaBlock = GroupedLocalSelfAttention(
                cfg.groups,
                n,
                cfg.heads,
                rng,
                use_local_queries=cfg.use_local_queries,
                use_group_mean=cfg.use_group_mean,
                improved_local_queries=cfg.use_improved_local_queries,
                dropout=cfg.dropout,
            )
        else:
            self.attention = VanillaBlock(n, cfg.heads, rng, cfg.dropout)
        self.sampler = BevSampler(n, cfg.bev_channels, cfg.sampling_points, rng)
        self.sample_norm = LayerNorm(n)
        self.ffn_in = Linear(n, cfg.ffn_ratio * n, rng)
        self.ffn_out = Linear(cfg.ffn_ratio * n, n, rng)
        self.ffn_norm = LayerNorm(n)
        self.class_head = Linear(n, cfg.num_classes + 1, rng)
        self.point_head = MLP([n, n, 2], rng, zero_last=True)

    def __call__(
        self,
        content: Tensor,
        anchors: Tensor,
        bev: Tensor,
        hooks: DecoderHooks,
        rng: np.random.Generator | None,
        positions: NDArray[np.floating[Any]] | None = None,
    ) -> tuple[Tensor, LayerPrediction]:
        anchor_values = anchors.data if positions is None else positions
        x = self.attention(content, anchor_values, rng, hooks.zero_step2)
        sampled = self.sampler(x, anchor_values, bev)
        x = self.sample_norm(ops.add(x, maybe_dropout(sampled, self.dropout, rng)))
        hidden = self.ffn_out(ops.gelu(self.ffn_in(x)))
        x = self.ffn_norm(ops.add(x, maybe_dropout(hidden, self.dropout, rng)))

        logits = self.class_head(ops.mean_axis(x, axis=1))
        if hooks.refine_anchors:
            delta = self.point_head(x)
            points = ops.sigmoid(ops.add(ops.inverse_sigmoid(anchors, ANCHOR_EPS), delta))
        else:
            points = anchors
        return x, LayerPrediction(logits, points)


def _check_finite(layer: int, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericFaultError(f"non-finite values in decoder layer {layer}", layer=layer)


class Decoder(Module):
    """Query units plus the layer stack; parameter names are stable checkpoint keys."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.query = QueryUnits(
            cfg.groups, cfg.n_points, cfg.embed_dim, rng, anchored=cfg.query_type == "anchor"
        )
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]

    def _run_branch(
        self,
        content: Tensor,
        anchors: Tensor,
        bev: Tensor,
        hooks: DecoderHooks,
        rng: np.random.Generator | None,
        branch: str = "central",
    ) -> list[LayerPrediction]:
        outputs: list[LayerPrediction] = []
        frozen = (hooks.frozen_positions or {}).get(branch)
        for index, layer in enumerate(self.layers):
            positions = frozen if index == 0 else None
            content, prediction = layer(content, anchors, bev, hooks, rng, positions)
            _check_finite(index, content, prediction.class_logits, prediction.points)
            outputs.append(prediction)
            anchors = prediction.points.detach() if hooks.refine_anchors else prediction.points
        return outputs

    def __call__(
        self,
        bev: Tensor | NDArray[np.floating[Any]],
        mode: Literal["train", "infer"] = "infer",
        rng: np.random.Generator | None = None,
        hooks: DecoderHooks | None = None,
    ) -> DetectionSet:
        """
        Run the head on one C x H x W grid.

        Train mode needs `rng` whenever the non-central branch or dropout is
        on; it also drives the fresh non-central placements. Infer mode builds
        only the central branch and never drops.
        """
        hooks = hooks or DecoderHooks()
        grid = as_tensor(bev)
        if grid.ndim != 3 or grid.shape[0] != self.cfg.bev_channels:
            raise DimensionError(
                f"BEV grid must be {self.cfg.bev_channels} x H x W, got {grid.shape}"
            )
        if mode not in ("train", "infer"):
            raise ContractError(f"unknown decoder mode {mode!r}")

        train = mode == "train"
        twin = train and self.cfg.use_noncentral_branch
        step_rng = rng if train else None
        if train and rng is None and (twin or self.cfg.dropout > 0.0):
            raise ContractError("train mode needs an rng")

        if twin:
            if hooks.noncentral_offsets is not None:
                self.query.set_offsets(hooks.noncentral_offsets)
            elif rng is not None:
                self.query.resample_noncentral(
                    self.cfg.neighborhood_side, rng, self.cfg.noncentral_mode
                )
        units = self.query.assemble(with_noncentral=twin)

        detections = DetectionSet(self._run_branch(units.content, units.central, grid, hooks, step_rng))
        if twin and units.noncentral is not None:
            detections.noncentral = self._run_branch(
                units.content, units.noncentral, grid, hooks, step_rng, "noncentral"
            )
        return detections


def decoder_forward(
    decoder: Decoder,
    bev: Tensor | NDArray[np.floating[Any]],
    mode: Literal["train", "infer"] = "infer",
    rng: np.random.Generator | None = None,
) -> DetectionSet:
    return decoder(bev, mode, rng)


def count_parameters(cfg: DecoderConfig) -> int:
    """Learnable scalars in a model built from `cfg` (independent of the init seed)."""
    model = Decoder(cfg, np.random.default_rng(0))
    return sum(p.size for _, p in model.named_parameters())
