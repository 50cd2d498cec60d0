"""
Ablation runner: train and evaluate each preset on one dataset under one seed.

Rows:
  a  baseline, central queries only
  b  + anchor neighborhoods, non-central branch fitted to raw GT
  c  + GT neighborhoods
  d  + improved local queries (omega 0.2, a 0.5 m)
  e  random anchors: row c with non-central anchors spread over the BEV plane
  f  vanilla queries: row a with positions predicted from learned content
     queries and all-token self-attention
  g  anchor queries: row a with all-token self-attention
  h  random anchors without GT neighborhoods: row b with spread anchors

Rows f, g and a compare query and attention designs; rows b, c, e and h
cross anchor placement with GT neighborhoods.
"""

from __future__ import annotations

import csv
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

import structlog

from eanmap.evaluation import evaluate_split
from eanmap.experiment import build_config
from eanmap.training.trainer import Trainer

if TYPE_CHECKING:
    from collections.abc import Sequence

    from eanmap.data.synthetic import Scene
    from eanmap.experiment import ExperimentConfig

log = structlog.get_logger()
UTC = timezone.utc


class RunStatus(str, Enum):
    """Status of an ablation row or of the whole run."""

    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILED = "failed"
    PARTIAL = "partial"  # Some rows succeeded, some failed


_BASELINE = [
    "decoder.use_noncentral_branch=false",
    "loss.lambda_noncentral=0",
    "decoder.use_gt_neighborhood=false",
    "decoder.use_improved_local_queries=false",
    "decoder.gt_omega=0.25",
    "decoder.neighborhood_side=0.55",
    "decoder.noncentral_mode=\"neighborhood\"",
    "decoder.query_type=\"anchor\"",
    "decoder.self_attention=\"glsa\"",
]
_NEIGHBORHOOD = [
    *_BASELINE[3:],
    "decoder.use_noncentral_branch=true",
    "loss.lambda_noncentral=1",
    "decoder.use_gt_neighborhood=false",
]
_GT_NEIGHBORHOOD = [*_NEIGHBORHOOD, "decoder.use_gt_neighborhood=true"]

ABLATION_PRESETS: dict[str, tuple[str, list[str]]] = {
    "a": ("baseline", _BASELINE),
    "b": ("+ anchor neighborhoods", _NEIGHBORHOOD),
    "c": ("+ GT neighborhoods", _GT_NEIGHBORHOOD),
    "d": (
        "+ improved local queries",
        [
            *_GT_NEIGHBORHOOD,
            "decoder.use_improved_local_queries=true",
            "decoder.gt_omega=0.2",
            "decoder.neighborhood_side=0.5",
        ],
    ),
    "e": ("random anchors", [*_GT_NEIGHBORHOOD, "decoder.noncentral_mode=\"random\""]),
    "f": (
        "vanilla queries",
        [*_BASELINE, "decoder.query_type=\"vanilla\"", "decoder.self_attention=\"vanilla\""],
    ),
    "g": ("anchor queries", [*_BASELINE, "decoder.self_attention=\"vanilla\""]),
    "h": ("random anchors, raw GT", [*_NEIGHBORHOOD, "decoder.noncentral_mode=\"random\""]),
}


def preset_config(base: ExperimentConfig, name: str) -> ExperimentConfig:
    _, overrides = ABLATION_PRESETS[name]
    return build_config(base.model_dump(mode="json"), overrides)


@dataclass
class AblationRow:
    name: str
    label: str
    status: RunStatus = RunStatus.PENDING
    mAP: float | None = None  # noqa: N815 - conventional metric name
    final_loss: float | None = None
    error: str | None = None
    started_at: datetime | None = None
    completed_at: datetime | None = None


@dataclass
class AblationRun:
    id: str
    seed: int
    status: RunStatus
    rows: list[AblationRow] = field(default_factory=list)
    started_at: datetime = field(default_factory=lambda: datetime.now(UTC))
    completed_at: datetime | None = None


class AblationRunner:
    """Trains every requested preset in turn; a failing row does not stop the others."""

    def __init__(
        self,
        base: ExperimentConfig,
        out_dir: Path | str,
        seed: int = 0,
        threads: int = 1,
    ) -> None:
        self.base = base
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.threads = threads

    def run(
        self,
        train_scenes: Sequence[Scene],
        val_scenes: Sequence[Scene],
        names: Sequence[str] | None = None,
    ) -> AblationRun:
        run = AblationRun(id=str(uuid.uuid4()), seed=self.seed, status=RunStatus.RUNNING)
        run.rows = [AblationRow(n, ABLATION_PRESETS[n][0]) for n in (names or list(ABLATION_PRESETS))]
        log.info("ablation_started", run_id=run.id, rows=[r.name for r in run.rows], seed=self.seed)

        for row in run.rows:
            self._run_row(row, train_scenes, val_scenes)

        statuses = {r.status for r in run.rows}
        if statuses == {RunStatus.SUCCESS}:
            run.status = RunStatus.SUCCESS
        elif statuses == {RunStatus.FAILED}:
            run.status = RunStatus.FAILED
        else:
            run.status = RunStatus.PARTIAL
        run.completed_at = datetime.now(UTC)

        write_table(self.out_dir / "ablation.csv", run)
        log.info(
            "ablation_completed",
            run_id=run.id,
            status=run.status.value,
            duration_seconds=(run.completed_at - run.started_at).total_seconds(),
        )
        return run

    def _run_row(self, row: AblationRow, train_scenes: Sequence[Scene], val_scenes: Sequence[Scene]) -> None:
        row.status = RunStatus.RUNNING
        row.started_at = datetime.now(UTC)
        log.info("ablation_row_started", row=row.name, label=row.label)
        try:
            cfg = preset_config(self.base, row.name)
            trainer = Trainer(cfg, self.out_dir / f"row_{row.name}", self.seed)
            result = trainer.fit(train_scenes)
            report, _, _ = evaluate_split(trainer.model, val_scenes, cfg.eval, self.threads)
            row.mAP = report.mAP
            row.final_loss = result.epoch_losses[-1]
            row.status = RunStatus.SUCCESS
        except Exception as e:
            log.exception("ablation_row_failed", row=row.name, error=str(e))
            row.status = RunStatus.FAILED
            row.error = str(e)
        row.completed_at = datetime.now(UTC)
        log.info("ablation_row_completed", row=row.name, status=row.status.value, mAP=row.mAP)


def write_table(path: Path, run: AblationRun) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "label", "status", "mAP", "final_loss", "seed"])
        for row in run.rows:
            writer.writerow(
                [
                    row.name,
                    row.label,
                    row.status.value,
                    "" if row.mAP is None else f"{row.mAP:.6f}",
                    "" if row.final_loss is None else f"{row.final_loss:.6f}",
                    run.seed,
                ]
            )
