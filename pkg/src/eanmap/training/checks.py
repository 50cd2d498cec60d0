"""
End-to-end gradient check: a tiny decoder and its full training loss.

Every finite-difference evaluation reuses the matching and the first-layer
anchor positions of the unperturbed model. Matching is piecewise constant
in the parameters, and at init (gp = 0, near-tied class scores) a step of
1e-5 can flip it. Anchor positions feed the sine encoding and the sampling
base as constants, so holding them fixed makes the finite differences see
exactly the paths the tape records, P and gp included.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from eanmap.autodiff.gradcheck import GradCheckCase, GradCheckRegistry
from eanmap.autodiff.tensor import no_grad
from eanmap.data.synthetic import SceneConfig, generate_scene
from eanmap.errors import ContractError
from eanmap.model.decoder import Decoder, DecoderConfig, DecoderHooks
from eanmap.training.loss import LossConfig, build_targets, compute_loss

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from eanmap.autodiff.gradcheck import CaseFn
    from eanmap.autodiff.tensor import Tensor
    from eanmap.training.loss import BranchAssignments

TINY_DECODER = DecoderConfig(
    layers=1,
    embed_dim=8,
    heads=2,
    sampling_points=2,
    n_points=4,
    groups=3,
    bev_channels=3,
)
TINY_SCENE = SceneConfig(
    n_points=4,
    channels=3,
    height=6,
    width=4,
    max_instances=3,
    dividers=(1, 2),
    boundaries=(0, 1),
    crossings=(0, 0),
)


def _build_model_case(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    seed = int(rng.integers(0, 2**31))
    model = Decoder(TINY_DECODER, np.random.default_rng(seed))
    scene = generate_scene(TINY_SCENE, np.random.default_rng(seed + 1))
    targets = build_targets(scene, TINY_DECODER.n_points)
    params = dict(model.named_parameters())
    names = list(params)

    model.query.resample_noncentral(TINY_DECODER.neighborhood_side, np.random.default_rng(seed + 2))
    offsets = model.query.offsets
    with no_grad():
        units = model.query.assemble(with_noncentral=True)
    if offsets is None or units.noncentral is None:
        raise ContractError("tiny decoder check needs neighborhood offsets")
    hooks = DecoderHooks(
        noncentral_offsets=offsets,
        frozen_positions={
            "central": np.array(units.central.data, dtype=np.float64),
            "noncentral": np.array(units.noncentral.data, dtype=np.float64),
        },
    )

    def evaluate(fixed: BranchAssignments | None) -> tuple[Tensor, BranchAssignments]:
        detections = model(scene.bev_feature, "train", np.random.default_rng(seed + 2), hooks)
        result = compute_loss(
            detections,
            targets,
            LossConfig(),
            np.random.default_rng(seed + 3),
            omega=TINY_DECODER.gt_omega,
            assignments=fixed,
        )
        return result.total, result.assignments

    with no_grad():
        _, assignments = evaluate(None)

    def fn(tensors: Sequence[Tensor]) -> Tensor:
        model.bind_parameters(dict(zip(names, tensors, strict=True)))
        return evaluate(assignments)[0]

    return fn, [np.array(p.data, dtype=np.float64) for p in params.values()]


def register_model_checks(registry: GradCheckRegistry) -> None:
    registry.register(GradCheckCase("decoder_loss", _build_model_case, trials=1))
