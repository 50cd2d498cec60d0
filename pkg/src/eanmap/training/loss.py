"""
Set-prediction loss for both query branches.

Each branch is matched to its own targets independently: the central
branch to the resampled GT, the non-central branch to GT jittered inside
its neighborhood (or to raw GT when neighborhoods are off).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor
from eanmap.errors import ConfigError
from eanmap.geometry import (
    ResampledElement,
    perturb_in_gt_neighborhood,
    resample,
    to_normalized,
)
from eanmap.training.matching import Assignment, hungarian_match

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from eanmap.data.synthetic import Scene
    from eanmap.model.decoder import DetectionSet, LayerPrediction


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_center: float = 1.0
    lambda_noncentral: float = 1.0
    w_cls: float = 2.0
    w_pts: float = 5.0
    share_assignment: bool = False


class LayerLoss(BaseModel):
    cls: float
    pts: float
    noncentral_cls: float | None = None
    noncentral_pts: float | None = None


class LossReport(BaseModel):
    """One training iteration's loss, as written to the JSON-lines log."""

    epoch: int = 0
    step: int = 0
    total: float
    center: float
    noncentral: float | None = None
    layers: list[LayerLoss] = Field(default_factory=list)


@dataclass
class SceneTargets:
    """GT elements resampled to N points, in meters and normalized."""

    classes: NDArray[np.intp]
    closed: list[bool]
    elements: list[ResampledElement]
    points: NDArray[np.float64]  # G x N x 2, normalized

    @property
    def count(self) -> int:
        return len(self.classes)


def build_targets(scene: Scene, n_points: int) -> SceneTargets:
    elements = [resample(e, n_points) for e in scene.elements]
    points = (
        np.stack([to_normalized(e.points) for e in elements])
        if elements
        else np.zeros((0, n_points, 2))
    )
    return SceneTargets(
        np.array([e.class_id for e in elements], dtype=np.intp),
        [e.closed for e in elements],
        elements,
        points,
    )


def perturbed_targets(targets: SceneTargets, omega: float, rng: np.random.Generator) -> SceneTargets:
    """Fresh GT-neighborhood jitter of every element (meters), renormalized."""
    moved = [perturb_in_gt_neighborhood(e, omega, rng).perturbed_points for e in targets.elements]
    points = np.stack([to_normalized(p) for p in moved]) if moved else targets.points
    return SceneTargets(targets.classes, targets.closed, targets.elements, points)


def _softmax_np(logits: NDArray[np.floating[Any]]) -> NDArray[np.float64]:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def match_layer(prediction: LayerPrediction, targets: SceneTargets, cfg: LossConfig) -> Assignment:
    return hungarian_match(
        _softmax_np(prediction.class_logits.data),
        prediction.points.data,
        targets.classes,
        targets.points,
        targets.closed,
        cfg.w_cls,
        cfg.w_pts,
    )


def layer_loss(
    prediction: LayerPrediction,
    targets: SceneTargets,
    assignment: Assignment,
    cfg: LossConfig,
) -> tuple[Tensor, float, float]:
    """w_cls * cross-entropy (unmatched -> background) + w_pts * L1 over matched points."""
    logits = prediction.class_logits
    M, classes = logits.shape
    labels = np.full(M, classes - 1, dtype=np.intp)
    labels[assignment.rows] = targets.classes[assignment.cols]
    one_hot = np.eye(classes)[labels]
    log_probs = ops.log_softmax_lastdim(logits)
    ce = ops.scale(ops.sum_all(ops.mul(log_probs, Tensor(one_hot, dtype=logits.dtype))), -1.0 / M)
    loss = ops.scale(ce, cfg.w_cls)
    pts_value = 0.0

    if targets.count:
        matched = ops.take(prediction.points, assignment.rows, axis=0)
        ordered = np.stack(
            [targets.points[g][order] for g, order in zip(assignment.cols, assignment.orderings, strict=True)]
        )
        diff = ops.sub(matched, Tensor(ordered, dtype=logits.dtype))
        n_points = prediction.points.shape[1]
        l1 = ops.scale(ops.sum_all(ops.abs_(diff)), 1.0 / (targets.count * n_points))
        loss = ops.add(loss, ops.scale(l1, cfg.w_pts))
        pts_value = l1.item()
    return loss, ce.item(), pts_value


def _mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


@dataclass
class BranchAssignments:
    """Per-layer matches of one loss evaluation; pass them back to hold matching fixed."""

    central: list[Assignment] = field(default_factory=list)
    noncentral: list[Assignment] | None = None


@dataclass
class LossResult:
    total: Tensor
    report: LossReport
    assignments: BranchAssignments


def compute_loss(
    detections: DetectionSet,
    targets: SceneTargets,
    cfg: LossConfig,
    rng: np.random.Generator,
    omega: float = 0.2,
    use_gt_neighborhood: bool = True,
    assignments: BranchAssignments | None = None,
) -> LossResult:
    """
    L = lambda_center * L_center + lambda_noncentral * L_noncentral.

    Each branch's loss is the mean of its per-layer losses. The non-central
    targets are jittered once per call and shared by all layers. Given
    `assignments`, no matching runs and those matches are used as is.
    """
    if targets.count > detections.final.class_logits.shape[0]:
        raise ConfigError("scene has more elements than query groups")

    center_terms: list[Tensor] = []
    reports: list[LayerLoss] = []
    used = BranchAssignments()
    for index, prediction in enumerate(detections.layers):
        assignment = (
            assignments.central[index] if assignments is not None else match_layer(prediction, targets, cfg)
        )
        used.central.append(assignment)
        loss, ce, pts = layer_loss(prediction, targets, assignment, cfg)
        center_terms.append(loss)
        reports.append(LayerLoss(cls=ce, pts=pts))
    center = _mean(center_terms)
    total = ops.scale(center, cfg.lambda_center)

    noncentral_value: float | None = None
    if detections.noncentral is not None and cfg.lambda_noncentral != 0.0:
        twin_targets = perturbed_targets(targets, omega, rng) if use_gt_neighborhood else targets
        twin_terms: list[Tensor] = []
        used.noncentral = []
        for index, prediction in enumerate(detections.noncentral):
            if assignments is not None and assignments.noncentral is not None:
                assignment = assignments.noncentral[index]
            elif cfg.share_assignment:
                assignment = used.central[index]
            else:
                assignment = match_layer(prediction, twin_targets, cfg)
            used.noncentral.append(assignment)
            loss, ce, pts = layer_loss(prediction, twin_targets, assignment, cfg)
            twin_terms.append(loss)
            reports[index].noncentral_cls = ce
            reports[index].noncentral_pts = pts
        noncentral = _mean(twin_terms)
        noncentral_value = noncentral.item()
        total = ops.add(total, ops.scale(noncentral, cfg.lambda_noncentral))

    report = LossReport(
        total=total.item(),
        center=center.item(),
        noncentral=noncentral_value,
        layers=reports,
    )
    return LossResult(total, report, used)


def merge_reports(reports: Sequence[LossReport], epoch: int, step: int) -> LossReport:
    """Average per-scene reports of one batch."""
    count = len(reports)

    def _avg(values: Sequence[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return sum(present) / len(present) if present else None

    layers = [
        LayerLoss(
            cls=sum(r.layers[i].cls for r in reports) / count,
            pts=sum(r.layers[i].pts for r in reports) / count,
            noncentral_cls=_avg([r.layers[i].noncentral_cls for r in reports]),
            noncentral_pts=_avg([r.layers[i].noncentral_pts for r in reports]),
        )
        for i in range(len(reports[0].layers))
    ]
    return LossReport(
        epoch=epoch,
        step=step,
        total=sum(r.total for r in reports) / count,
        center=sum(r.center for r in reports) / count,
        noncentral=_avg([r.noncentral for r in reports]),
        layers=layers,
    )
