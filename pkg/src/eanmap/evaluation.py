"""
Chamfer-thresholded average precision.

A prediction is a true positive at threshold tau when it claims a still
unclaimed GT element of its class whose Chamfer distance is below tau.
Predictions are processed per scene in descending score order and each one
takes its closest available GT.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from eanmap.autodiff.tensor import no_grad
from eanmap.errors import ConfigError
from eanmap.geometry import NUM_CLASSES, chamfer_distance, from_normalized, resample

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from eanmap.data.synthetic import Scene
    from eanmap.model.decoder import Decoder

log = structlog.get_logger()


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    score_floor: float = 0.0
    classes: tuple[int, ...] = tuple(range(NUM_CLASSES))

    @model_validator(mode="after")
    def _check_thresholds(self) -> EvalConfig:
        t = self.thresholds
        if not t or t[0] <= 0.0 or any(b <= a for a, b in zip(t, t[1:], strict=False)):
            raise ConfigError(f"thresholds must be positive and strictly increasing, got {t}")
        return self


class ClassAP(BaseModel):
    class_id: int
    ap_by_threshold: dict[str, float | None]
    ap: float | None


class EvalReport(BaseModel):
    classes: list[ClassAP] = Field(default_factory=list)
    mAP: float  # noqa: N815 - conventional metric name
    scenes: int = 0
    predictions: int = 0


@dataclass
class ScenePredictions:
    """Scored element predictions for one scene, points in meters."""

    scene_id: int
    classes: NDArray[np.intp]
    scores: NDArray[np.float64]
    points: NDArray[np.float64]  # P x N x 2


@dataclass
class SceneGroundTruth:
    scene_id: int
    classes: NDArray[np.intp]
    points: NDArray[np.float64]  # G x N x 2, meters


def ground_truth(scene: Scene, n_points: int) -> SceneGroundTruth:
    elements = [resample(e, n_points) for e in scene.elements]
    points = np.stack([e.points for e in elements]) if elements else np.zeros((0, n_points, 2))
    return SceneGroundTruth(
        scene.scene_id, np.array([e.class_id for e in elements], dtype=np.intp), points
    )


def match_predictions(
    preds: Sequence[ScenePredictions],
    gts: Sequence[SceneGroundTruth],
    class_id: int,
    threshold: float,
) -> tuple[NDArray[np.bool_], NDArray[np.float64], int]:
    """
    TP flags and scores for every `class_id` prediction, plus the GT count.

    Flags come back in descending score order across the whole split.
    """
    flags: list[bool] = []
    scores: list[float] = []
    total_gt = 0
    for pred, gt in zip(preds, gts, strict=True):
        gt_points = gt.points[gt.classes == class_id]
        total_gt += len(gt_points)
        mine = np.flatnonzero(pred.classes == class_id)
        order = mine[np.argsort(-pred.scores[mine], kind="stable")]
        claimed = np.zeros(len(gt_points), dtype=bool)
        for index in order:
            best, best_dist = -1, math.inf
            for g, target in enumerate(gt_points):
                if claimed[g]:
                    continue
                dist = chamfer_distance(pred.points[index], target)
                if dist < best_dist:
                    best, best_dist = g, dist
            hit = best >= 0 and best_dist < threshold
            if hit:
                claimed[best] = True
            flags.append(hit)
            scores.append(float(pred.scores[index]))

    score_arr = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-score_arr, kind="stable")
    return np.asarray(flags, dtype=bool)[order], score_arr[order], total_gt


def average_precision(
    flags: Sequence[bool] | NDArray[np.bool_],
    scores: Sequence[float] | NDArray[np.floating[Any]],
    total_gt: int,
) -> float | None:
    """
    All-point interpolated AP.

    None when there is neither GT nor a prediction; 0 when there are
    predictions but no GT.
    """
    flag_arr = np.asarray(flags, dtype=bool)
    if total_gt == 0:
        return None if len(flag_arr) == 0 else 0.0
    if len(flag_arr) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = flag_arr[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(envelope[hits]) / total_gt


def _mean(values: Sequence[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def evaluate_predictions(
    preds: Sequence[ScenePredictions],
    gts: Sequence[SceneGroundTruth],
    cfg: EvalConfig,
) -> EvalReport:
    classes: list[ClassAP] = []
    for class_id in cfg.classes:
        by_tau: dict[str, float | None] = {}
        for tau in cfg.thresholds:
            flags, scores, total_gt = match_predictions(preds, gts, class_id, tau)
            by_tau[f"{tau:g}"] = average_precision(flags, scores, total_gt)
        classes.append(ClassAP(class_id=class_id, ap_by_threshold=by_tau, ap=_mean(list(by_tau.values()))))
    m_ap = _mean([c.ap for c in classes])
    return EvalReport(
        classes=classes,
        mAP=0.0 if m_ap is None else m_ap,
        scenes=len(preds),
        predictions=sum(len(p.scores) for p in preds),
    )


def predict_scene(model: Decoder, scene: Scene, score_floor: float = 0.0) -> ScenePredictions:
    """Central-branch inference on one scene; the score is the best non-background probability."""
    with no_grad():
        final = model(scene.bev_feature, "infer").final
    logits = final.class_logits.data.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    foreground = probs[:, :-1]
    classes = foreground.argmax(axis=-1)
    scores = foreground.max(axis=-1)
    keep = scores >= score_floor
    points = from_normalized(final.points.data.astype(np.float64))
    return ScenePredictions(scene.scene_id, classes[keep], scores[keep], points[keep])


def oracle_predictions(gts: Sequence[SceneGroundTruth]) -> list[ScenePredictions]:
    """GT echoed back as unit-score predictions."""
    return [
        ScenePredictions(g.scene_id, g.classes.copy(), np.ones(len(g.classes)), g.points.copy())
        for g in gts
    ]


def evaluate_split(
    model: Decoder,
    scenes: Sequence[Scene],
    cfg: EvalConfig,
    threads: int = 1,
) -> tuple[EvalReport, list[ScenePredictions], list[SceneGroundTruth]]:
    """Infer every scene (in parallel over read-only weights) and score the split."""
    if scenes and scenes[0].bev_feature.shape[0] != model.cfg.bev_channels:
        raise ConfigError("checkpoint channels do not match the dataset grid")
    gts = [ground_truth(s, model.cfg.n_points) for s in scenes]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        preds = list(pool.map(lambda s: predict_scene(model, s, cfg.score_floor), scenes))
    report = evaluate_predictions(preds, gts, cfg)
    log.info("split_evaluated", scenes=len(scenes), mAP=report.mAP)
    return report, preds, gts


def write_scene_chamfer_csv(
    path: Path | str,
    preds: Sequence[ScenePredictions],
    gts: Sequence[SceneGroundTruth],
) -> None:
    """Per-GT nearest same-class prediction distance, one row per GT element."""
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["scene_id", "gt_index", "class_id", "nearest_chamfer"])
        for pred, gt in zip(preds, gts, strict=True):
            for g, (class_id, target) in enumerate(zip(gt.classes, gt.points, strict=True)):
                same = pred.points[pred.classes == class_id]
                nearest = min((chamfer_distance(p, target) for p in same), default=math.inf)
                writer.writerow([gt.scene_id, g, int(class_id), f"{nearest:.6f}"])
