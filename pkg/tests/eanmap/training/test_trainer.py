"""Tests for the training loop and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from eanmap.autodiff.archive import load_archive
from eanmap.data.synthetic import Scene, generate_split
from eanmap.errors import ConfigError, NumericFaultError
from eanmap.experiment import ExperimentConfig, load_config
from eanmap.training.loss import build_targets
from eanmap.training.trainer import (
    FINAL_CHECKPOINT,
    LOG_NAME,
    Trainer,
    TrainConfig,
    check_capacity,
    encode_rng_state,
    load_model,
    restore_rng_state,
    train,
)


def _params(path: Path) -> dict[str, np.ndarray]:
    arrays, _ = load_archive(path)
    return {k: v for k, v in arrays.items() if k.startswith("param.")}


class TestTrainConfig:
    """Tests for training config validation."""

    def test_positive_epochs(self) -> None:
        """Should reject zero epochs."""
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)


class TestRngState:
    """Tests for generator state in checkpoint metadata."""

    def test_json_safe(self, rng: np.random.Generator) -> None:
        """Should survive JSON and continue the same stream."""
        encoded = json.loads(json.dumps(encode_rng_state(rng)))
        expected = rng.random(5)
        other = np.random.default_rng(0)
        restore_rng_state(other, encoded)
        np.testing.assert_array_equal(other.random(5), expected)


class TestTrainer:
    """Tests for fitting, logging and resume."""

    def test_fit_writes_outputs(
        self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path
    ) -> None:
        """Should log one line per step and checkpoint every epoch."""
        result = train(tiny_config, tiny_scenes, tmp_path, seed=0)
        assert result.checkpoint == tmp_path / FINAL_CHECKPOINT
        assert result.checkpoint.exists()
        assert (tmp_path / "checkpoints" / "epoch_001.ckpt").exists()
        assert (tmp_path / "checkpoints" / "epoch_002.ckpt").exists()
        lines = (tmp_path / LOG_NAME).read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4
        first = json.loads(lines[0])
        assert first["step"] == 1
        assert first["noncentral"] is not None
        assert len(result.epoch_losses) == 2
        assert all(np.isfinite(result.epoch_losses))

    def test_same_seed_same_weights(
        self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path
    ) -> None:
        """Should produce identical checkpoints for identical seeds."""
        a = train(tiny_config, tiny_scenes, tmp_path / "a", seed=4)
        b = train(tiny_config, tiny_scenes, tmp_path / "b", seed=4)
        pa, pb = _params(a.checkpoint), _params(b.checkpoint)
        assert pa.keys() == pb.keys()
        for name in pa:
            np.testing.assert_array_equal(pa[name], pb[name])

    def test_resume_is_bit_exact(
        self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path
    ) -> None:
        """Should finish a resumed run with the same weights as an uninterrupted one."""
        full = train(tiny_config, tiny_scenes, tmp_path / "full", seed=2)
        resumed = train(
            tiny_config,
            tiny_scenes,
            tmp_path / "resumed",
            seed=2,
            resume=tmp_path / "full" / "checkpoints" / "epoch_001.ckpt",
        )
        assert len(resumed.epoch_losses) == 1
        assert resumed.epoch_losses[0] == full.epoch_losses[1]
        pa, pb = _params(full.checkpoint), _params(resumed.checkpoint)
        for name in pa:
            np.testing.assert_array_equal(pa[name], pb[name])

    def test_checkpoint_meta(
        self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path
    ) -> None:
        """Should store epoch, step, seed and the config."""
        result = train(tiny_config, tiny_scenes, tmp_path, seed=7)
        _, meta = load_archive(result.checkpoint)
        assert (meta["epoch"], meta["step"], meta["seed"]) == (2, 4, 7)
        assert ExperimentConfig.model_validate(meta["config"]) == tiny_config

    def test_non_finite_batch_is_dumped(
        self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path
    ) -> None:
        """Should save the failing batch and re-raise."""
        scene = tiny_scenes[0]
        broken = Scene(99, scene.elements, np.full_like(scene.bev_feature, np.nan))
        trainer = Trainer(tiny_config, tmp_path, seed=0)
        with pytest.raises(NumericFaultError):
            trainer.train_step([broken], [build_targets(broken, 4)])
        arrays, meta = load_archive(tmp_path / "nan_dump_step000000.ckpt")
        assert "bev.99" in arrays
        assert meta["scene_ids"] == [99]
        assert meta["layer"] == 0
        assert trainer.step == 0

    def test_capacity(self, tiny_scenes: list[Scene]) -> None:
        """Should reject datasets with scenes larger than the group count."""
        targets = [build_targets(s, 4) for s in tiny_scenes]
        with pytest.raises(ConfigError):
            check_capacity(targets, 0)
        check_capacity(targets, 3)


class TestLoadModel:
    """Tests for restoring a trained model."""

    def test_round_trip(self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path) -> None:
        """Should restore the trained parameters."""
        trainer = Trainer(tiny_config, tmp_path, seed=1)
        result = trainer.fit(tiny_scenes)
        model = load_model(result.checkpoint, tiny_config)
        expected = trainer.model.state_dict()
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, expected[name])

    def test_missing(self, tiny_config: ExperimentConfig, tmp_path: Path) -> None:
        """Should raise FileNotFoundError for a missing checkpoint."""
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nope.ckpt", tiny_config)

    def test_wrong_shape(self, tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path) -> None:
        """Should reject a checkpoint from a differently shaped model."""
        result = train(tiny_config, tiny_scenes, tmp_path, seed=0)
        wider = tiny_config.model_copy(
            update={"decoder": tiny_config.decoder.model_copy(update={"embed_dim": 16})}
        )
        with pytest.raises(ConfigError):
            load_model(result.checkpoint, wider)


@pytest.mark.slow
def test_loss_goes_down(tiny_config: ExperimentConfig, tiny_scenes: list[Scene], tmp_path: Path) -> None:
    """Should lower the epoch loss over a short run."""
    cfg = tiny_config.model_copy(
        update={"train": tiny_config.train.model_copy(update={"epochs": 20, "lr": 5e-3})}
    )
    result = train(cfg, tiny_scenes, tmp_path, seed=0)
    assert result.epoch_losses[-1] < result.epoch_losses[0]


SMOKE_CONFIG = Path(__file__).parents[3] / "config" / "experiments" / "smoke.json"


class TestSmokeRecipe:
    """Tests for the CI-sized training recipe."""

    def test_loss_halves(self, tmp_path: Path) -> None:
        """Should end with a final-epoch loss at most half the first-epoch loss."""
        cfg = load_config(
            SMOKE_CONFIG,
            ["train.epochs=100", "train.lr=0.005", "train.checkpoint_every=0"],
        )
        scenes = generate_split(cfg.scene, cfg.train.train_scenes, 0, "train")
        result = train(cfg, scenes, tmp_path, seed=0)
        assert len(result.epoch_losses) == 100
        assert result.epoch_losses[-1] <= 0.5 * result.epoch_losses[0], result.epoch_losses[::10]
