"""Training loop, checkpoints, and resume."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from eanmap.autodiff import ops
from eanmap.autodiff.archive import load_archive, save_archive
from eanmap.autodiff.optim import AdamW
from eanmap.autodiff.tensor import Tensor, backward, clear_tape, set_default_dtype
from eanmap.errors import ConfigError, DimensionError, NumericFaultError
from eanmap.model.decoder import Decoder
from eanmap.training.loss import LossReport, SceneTargets, build_targets, compute_loss, merge_reports

if TYPE_CHECKING:
    from collections.abc import Sequence

    from eanmap.data.synthetic import Scene
    from eanmap.experiment import ExperimentConfig

log = structlog.get_logger()

LOG_NAME = "train_log.jsonl"
FINAL_CHECKPOINT = "final.ckpt"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = 2.5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1.25e-3
    epochs: int = 30
    batch_size: int = 4
    checkpoint_every: int = 1  # epochs; 0 keeps only the final checkpoint
    precision: Literal["float64", "float32"] = "float64"
    train_scenes: int = 512
    val_scenes: int = 64

    @model_validator(mode="after")
    def _check(self) -> TrainConfig:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.checkpoint_every < 0 or self.train_scenes < 1 or self.val_scenes < 0:
            raise ConfigError("checkpoint_every >= 0, train_scenes >= 1, val_scenes >= 0 required")
        return self


@dataclass
class TrainResult:
    checkpoint: Path
    epoch_losses: list[float] = field(default_factory=list)
    reports: list[LossReport] = field(default_factory=list)


def init_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(init rng, training rng); the training rng drives shuffling, placements and jitter."""
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def encode_rng_state(rng: np.random.Generator) -> dict[str, Any]:
    """Generator state with 128-bit integers as strings, so it survives JSON."""
    state = rng.bit_generator.state
    inner = {k: str(v) for k, v in state["state"].items()}
    return {**state, "state": inner}


def restore_rng_state(rng: np.random.Generator, encoded: dict[str, Any]) -> None:
    inner = {k: int(v) for k, v in encoded["state"].items()}
    rng.bit_generator.state = {**encoded, "state": inner}


def save_checkpoint(
    path: Path,
    model: Decoder,
    optimizer: AdamW,
    meta: dict[str, Any],
) -> None:
    arrays: dict[str, Any] = {}
    for name, value in model.state_dict().items():
        arrays[f"param.{name}"] = value
    for name, value in optimizer.state.m.items():
        arrays[f"adam.m.{name}"] = value
    for name, value in optimizer.state.v.items():
        arrays[f"adam.v.{name}"] = value
    save_archive(path, arrays, {**meta, "adam_step": optimizer.state.step})
    log.info("checkpoint_saved", path=str(path), epoch=meta.get("epoch"), step=meta.get("step"))


def load_checkpoint(
    path: Path | str,
    model: Decoder,
    optimizer: AdamW | None = None,
) -> dict[str, Any]:
    """Restore parameters (and optimizer moments); return the stored meta."""
    arrays, meta = load_archive(path)
    params = {k.removeprefix("param."): v for k, v in arrays.items() if k.startswith("param.")}
    try:
        model.load_state_dict(params)
    except DimensionError as e:
        raise ConfigError(f"{path} does not fit the configured model: {e}") from e
    if optimizer is not None:
        optimizer.state.m = {
            k.removeprefix("adam.m."): v for k, v in arrays.items() if k.startswith("adam.m.")
        }
        optimizer.state.v = {
            k.removeprefix("adam.v."): v for k, v in arrays.items() if k.startswith("adam.v.")
        }
        optimizer.state.step = int(meta.get("adam_step", 0))
    return meta


def check_capacity(targets: Sequence[SceneTargets], groups: int) -> None:
    worst = max((t.count for t in targets), default=0)
    if worst > groups:
        raise ConfigError(f"a scene has {worst} elements but the model has only {groups} groups")


class Trainer:
    """Owns one model, its optimizer, and the training rng."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path | str, seed: int = 0) -> None:
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.seed = seed
        set_default_dtype(cfg.train.precision)
        init_rng, self.rng = init_rngs(seed)
        self.model = Decoder(cfg.decoder, init_rng)
        self.optimizer = AdamW(
            self.model.parameters(),
            lr=cfg.train.lr,
            betas=cfg.train.betas,
            eps=cfg.train.eps,
            weight_decay=cfg.train.weight_decay,
        )
        self.epoch = 0
        self.step = 0

    @property
    def log_path(self) -> Path:
        return self.out_dir / LOG_NAME

    def checkpoint_path(self, epoch: int) -> Path:
        return self.out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt"

    def _meta(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.seed,
            "rng_state": encode_rng_state(self.rng),
            "config": self.cfg.model_dump(mode="json"),
        }

    def resume(self, path: Path | str) -> None:
        meta = load_checkpoint(path, self.model, self.optimizer)
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        restore_rng_state(self.rng, meta["rng_state"])
        log.info("training_resumed", path=str(path), epoch=self.epoch, step=self.step)

    def _dump_batch(self, scenes: Sequence[Scene], error: Exception) -> Path:
        path = self.out_dir / f"nan_dump_step{self.step:06d}.ckpt"
        arrays: dict[str, Any] = {f"bev.{s.scene_id}": s.bev_feature for s in scenes}
        arrays.update({f"param.{k}": v for k, v in self.model.state_dict().items()})
        save_archive(
            path,
            arrays,
            {
                "epoch": self.epoch,
                "step": self.step,
                "scene_ids": [s.scene_id for s in scenes],
                "error": str(error),
                "layer": getattr(error, "layer", None),
            },
        )
        return path

    def train_step(self, scenes: Sequence[Scene], targets: Sequence[SceneTargets]) -> LossReport:
        """One optimizer step on a batch; the loss is the mean over its scenes."""
        cfg = self.cfg
        self.model.zero_grad()
        try:
            totals: list[Tensor] = []
            reports: list[LossReport] = []
            for scene, target in zip(scenes, targets, strict=True):
                detections = self.model(scene.bev_feature, "train", self.rng)
                result = compute_loss(
                    detections,
                    target,
                    cfg.loss,
                    self.rng,
                    omega=cfg.decoder.gt_omega,
                    use_gt_neighborhood=cfg.decoder.use_gt_neighborhood,
                )
                totals.append(result.total)
                reports.append(result.report)
            batch_loss = totals[0]
            for t in totals[1:]:
                batch_loss = ops.add(batch_loss, t)
            batch_loss = ops.scale(batch_loss, 1.0 / len(totals))
            if not math.isfinite(batch_loss.item()):
                raise NumericFaultError(f"non-finite loss at step {self.step}")
            backward(batch_loss)
        except NumericFaultError as e:
            clear_tape()
            dump = self._dump_batch(scenes, e)
            log.exception("training_aborted", step=self.step, dump=str(dump))
            raise

        self.optimizer.step()
        self.step += 1
        return merge_reports(reports, self.epoch, self.step)

    def fit(self, scenes: Sequence[Scene], resume: Path | str | None = None) -> TrainResult:
        cfg = self.cfg
        targets = [build_targets(s, cfg.decoder.n_points) for s in scenes]
        check_capacity(targets, cfg.decoder.groups)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            self.resume(resume)
        else:
            self.log_path.write_text("", encoding="utf-8")

        result = TrainResult(self.out_dir / FINAL_CHECKPOINT)
        batch = cfg.train.batch_size
        log.info(
            "training_started",
            scenes=len(scenes),
            epochs=cfg.train.epochs,
            start_epoch=self.epoch,
            seed=self.seed,
        )
        while self.epoch < cfg.train.epochs:
            order = self.rng.permutation(len(scenes))
            losses: list[float] = []
            with self.log_path.open("a", encoding="utf-8") as log_file:
                for start in range(0, len(order), batch):
                    idx = order[start : start + batch]
                    report = self.train_step([scenes[i] for i in idx], [targets[i] for i in idx])
                    log_file.write(report.model_dump_json() + "\n")
                    result.reports.append(report)
                    losses.append(report.total)
            epoch_loss = sum(losses) / len(losses)
            result.epoch_losses.append(epoch_loss)
            self.epoch += 1
            log.info("epoch_completed", epoch=self.epoch, loss=epoch_loss, step=self.step)
            every = cfg.train.checkpoint_every
            if every and self.epoch % every == 0:
                save_checkpoint(self.checkpoint_path(self.epoch), self.model, self.optimizer, self._meta())

        save_checkpoint(result.checkpoint, self.model, self.optimizer, self._meta())
        log.info("training_completed", epochs=self.epoch, steps=self.step)
        return result


def train(
    cfg: ExperimentConfig,
    scenes: Sequence[Scene],
    out_dir: Path | str,
    seed: int = 0,
    resume: Path | str | None = None,
) -> TrainResult:
    return Trainer(cfg, out_dir, seed).fit(scenes, resume)


def load_model(checkpoint: Path | str, cfg: ExperimentConfig) -> Decoder:
    """Build a model for `cfg` and fill it from a checkpoint."""
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    set_default_dtype(cfg.train.precision)
    model = Decoder(cfg.decoder, np.random.default_rng(0))
    load_checkpoint(checkpoint, model)
    return model
