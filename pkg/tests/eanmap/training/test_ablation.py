"""Tests for the ablation runner."""

from __future__ import annotations

import csv
from pathlib import Path
from unittest.mock import patch

from eanmap.data.synthetic import Scene
from eanmap.errors import ConfigError
from eanmap.experiment import ExperimentConfig
from eanmap.training.ablation import ABLATION_PRESETS, AblationRunner, RunStatus, preset_config


def _one_epoch(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": 1})})


class TestPresets:
    """Tests for the ablation row configs."""

    def test_baseline_has_no_twin(self, tiny_config: ExperimentConfig) -> None:
        """Should switch off the non-central branch and its loss."""
        cfg = preset_config(tiny_config, "a")
        assert not cfg.decoder.use_noncentral_branch
        assert cfg.loss.lambda_noncentral == 0.0

    def test_rows_add_mechanisms(self, tiny_config: ExperimentConfig) -> None:
        """Should turn mechanisms on row by row."""
        b, c, d = (preset_config(tiny_config, n).decoder for n in "bcd")
        assert b.use_noncentral_branch
        assert not b.use_gt_neighborhood
        assert c.use_gt_neighborhood
        assert not c.use_improved_local_queries
        assert d.use_improved_local_queries
        assert (d.gt_omega, d.neighborhood_side) == (0.2, 0.5)

    def test_random_anchor_row(self, tiny_config: ExperimentConfig) -> None:
        """Should spread the twin anchors over the plane."""
        assert preset_config(tiny_config, "e").decoder.noncentral_mode == "random"

    def test_query_design_rows(self, tiny_config: ExperimentConfig) -> None:
        """Should compare learned queries, anchor queries and GL-SA on the baseline."""
        a, f, g = (preset_config(tiny_config, n).decoder for n in "afg")
        assert (f.query_type, f.self_attention) == ("vanilla", "vanilla")
        assert (g.query_type, g.self_attention) == ("anchor", "vanilla")
        assert (a.query_type, a.self_attention) == ("anchor", "glsa")
        assert not f.use_noncentral_branch
        assert not g.use_noncentral_branch

    def test_random_anchors_on_raw_gt(self, tiny_config: ExperimentConfig) -> None:
        """Should pair spread twin anchors with raw GT targets."""
        h = preset_config(tiny_config, "h")
        assert h.decoder.noncentral_mode == "random"
        assert h.decoder.use_noncentral_branch
        assert not h.decoder.use_gt_neighborhood
        assert h.loss.lambda_noncentral == 1.0

    def test_rows_reset_switches(self, tiny_config: ExperimentConfig) -> None:
        """Should not inherit query or attention switches from the base config."""
        base = tiny_config.model_copy(
            update={"decoder": tiny_config.decoder.model_copy(update={"query_type": "vanilla"})}
        )
        assert preset_config(base, "c").decoder.query_type == "anchor"

    def test_keeps_base_shape(self, tiny_config: ExperimentConfig) -> None:
        """Should leave model shape and training settings alone."""
        for name in ABLATION_PRESETS:
            cfg = preset_config(tiny_config, name)
            assert cfg.decoder.embed_dim == tiny_config.decoder.embed_dim
            assert cfg.train == tiny_config.train


class TestAblationRunner:
    """Tests for running rows and reporting."""

    def test_success(
        self,
        tiny_config: ExperimentConfig,
        tiny_scenes: list[Scene],
        tiny_val: list[Scene],
        tmp_path: Path,
    ) -> None:
        """Should train, score and tabulate every requested row."""
        runner = AblationRunner(_one_epoch(tiny_config), tmp_path, seed=0)
        run = runner.run(tiny_scenes, tiny_val, ["a", "d"])
        assert run.status == RunStatus.SUCCESS
        assert [r.name for r in run.rows] == ["a", "d"]
        assert all(r.mAP is not None and 0.0 <= r.mAP <= 1.0 for r in run.rows)
        assert (tmp_path / "row_a" / "final.ckpt").exists()
        with (tmp_path / "ablation.csv").open(encoding="utf-8") as f:
            table = list(csv.DictReader(f))
        assert [row["row"] for row in table] == ["a", "d"]
        assert {row["status"] for row in table} == {"success"}

    def test_added_rows_train(
        self,
        tiny_config: ExperimentConfig,
        tiny_scenes: list[Scene],
        tiny_val: list[Scene],
        tmp_path: Path,
    ) -> None:
        """Should train and score the vanilla-query and raw-GT random-anchor rows."""
        runner = AblationRunner(_one_epoch(tiny_config), tmp_path, seed=0)
        run = runner.run(tiny_scenes, tiny_val, ["f", "h"])
        assert run.status == RunStatus.SUCCESS, [r.error for r in run.rows]
        assert all(r.final_loss is not None for r in run.rows)

    def test_failed_row_does_not_stop_others(
        self,
        tiny_config: ExperimentConfig,
        tiny_scenes: list[Scene],
        tiny_val: list[Scene],
        tmp_path: Path,
    ) -> None:
        """Should mark the run partial and record the failure."""

        def _flaky(base: ExperimentConfig, name: str) -> ExperimentConfig:
            if name == "b":
                raise ConfigError("broken preset")
            return preset_config(base, name)

        runner = AblationRunner(_one_epoch(tiny_config), tmp_path, seed=0)
        with patch("eanmap.training.ablation.preset_config", side_effect=_flaky):
            run = runner.run(tiny_scenes, tiny_val, ["a", "b"])
        assert run.status == RunStatus.PARTIAL
        failed = run.rows[1]
        assert failed.status == RunStatus.FAILED
        assert failed.error == "broken preset"
        assert failed.mAP is None
        assert run.rows[0].status == RunStatus.SUCCESS

    def test_all_failed(
        self,
        tiny_config: ExperimentConfig,
        tiny_scenes: list[Scene],
        tiny_val: list[Scene],
        tmp_path: Path,
    ) -> None:
        """Should mark the run failed and leave empty metric cells."""
        runner = AblationRunner(tiny_config, tmp_path, seed=0)
        with patch("eanmap.training.ablation.preset_config", side_effect=ConfigError("no preset")):
            run = runner.run(tiny_scenes, tiny_val, ["a", "c"])
        assert run.status == RunStatus.FAILED
        with (tmp_path / "ablation.csv").open(encoding="utf-8") as f:
            table = list(csv.DictReader(f))
        assert [(row["status"], row["mAP"]) for row in table] == [("failed", ""), ("failed", "")]
