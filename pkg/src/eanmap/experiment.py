"""Experiment configuration: one JSON file, one section per subsystem."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from eanmap.data.synthetic import SceneConfig
from eanmap.errors import ConfigError
from eanmap.evaluation import EvalConfig
from eanmap.model.decoder import DecoderConfig
from eanmap.training.loss import LossConfig
from eanmap.training.trainer import TrainConfig

if TYPE_CHECKING:
    from collections.abc import Sequence


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scene: SceneConfig = Field(default_factory=SceneConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_consistent(self) -> ExperimentConfig:
        if self.decoder.n_points != self.scene.n_points:
            raise ConfigError("decoder.n_points must equal scene.n_points")
        if self.decoder.bev_channels != self.scene.channels:
            raise ConfigError("decoder.bev_channels must equal scene.channels")
        if self.decoder.groups < self.scene.max_instances:
            raise ConfigError(
                f"decoder.groups ({self.decoder.groups}) must cover scene.max_instances "
                f"({self.scene.max_instances})"
            )
        return self


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply `section.key=value` pairs; the dotted path must name an existing field."""
    result = json.loads(json.dumps(data))
    for item in overrides:
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not key=value")
        keys = path.split(".")
        model: type[BaseModel] = ExperimentConfig
        node = result
        for depth, key in enumerate(keys):
            if key not in model.model_fields:
                raise ConfigError(f"unknown config key {path!r}")
            if depth == len(keys) - 1:
                node[key] = _parse_value(raw)
                break
            annotation = model.model_fields[key].annotation
            if not (isinstance(annotation, type) and issubclass(annotation, BaseModel)):
                raise ConfigError(f"{'.'.join(keys[: depth + 1])!r} is not a section")
            model = annotation
            node = node.setdefault(key, {})
    return result


def build_config(data: dict[str, Any], overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(apply_overrides(data, overrides))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Path | str | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a UTF-8 JSON config (defaults when `path` is None) and apply overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(data, overrides)
