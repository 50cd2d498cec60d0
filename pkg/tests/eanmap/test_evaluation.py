"""Tests for Chamfer-thresholded average precision."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from eanmap.data.synthetic import SceneConfig, generate_split
from eanmap.errors import ConfigError
from eanmap.evaluation import (
    EvalConfig,
    SceneGroundTruth,
    ScenePredictions,
    average_precision,
    evaluate_predictions,
    evaluate_split,
    ground_truth,
    match_predictions,
    oracle_predictions,
    predict_scene,
    write_scene_chamfer_csv,
)
from eanmap.model.decoder import Decoder, DecoderConfig

SCENES = SceneConfig(n_points=5, channels=3, height=8, width=6, max_instances=4)


@pytest.fixture
def gts() -> list[SceneGroundTruth]:
    return [ground_truth(s, 5) for s in generate_split(SCENES, 6, seed=0, split="val")]


def _line(x: float) -> np.ndarray:
    return np.stack([np.full(5, x), np.linspace(-10.0, 10.0, 5)], axis=-1)


class TestAveragePrecision:
    """Tests for the AP integral."""

    def test_hit_miss_hit(self) -> None:
        """Should give 5/6 for TP, FP, TP against two GT."""
        assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(5.0 / 6.0)

    def test_sorts_by_score(self) -> None:
        """Should rank by score before integrating."""
        assert average_precision([True, True, False], [0.9, 0.7, 0.8], 2) == pytest.approx(5.0 / 6.0)

    def test_empty_cases(self) -> None:
        """Should be None with nothing at all, 0 with predictions but no GT, 0 with GT but no predictions."""
        assert average_precision([], [], 0) is None
        assert average_precision([False], [0.5], 0) == 0.0
        assert average_precision([], [], 3) == 0.0

    def test_missed_gt_lowers_recall(self) -> None:
        """Should cap AP at recall."""
        assert average_precision([True], [0.9], 4) == pytest.approx(0.25)


class TestMatchPredictions:
    """Tests for greedy TP assignment."""

    def _scene(self) -> tuple[list[ScenePredictions], list[SceneGroundTruth]]:
        gt = SceneGroundTruth(0, np.array([1, 1]), np.stack([_line(0.0), _line(5.0)]))
        pred = ScenePredictions(
            0,
            np.array([1, 1, 0]),
            np.array([0.9, 0.8, 0.95]),
            np.stack([_line(0.2), _line(0.1), _line(5.0)]),
        )
        return [pred], [gt]

    def test_each_gt_claimed_once(self) -> None:
        """Should turn a second claim on the same GT into a false positive."""
        preds, gts = self._scene()
        flags, scores, total = match_predictions(preds, gts, 1, 1.0)
        assert total == 2
        np.testing.assert_array_equal(flags, [True, False])
        np.testing.assert_array_equal(scores, [0.9, 0.8])

    def test_other_classes_ignored(self) -> None:
        """Should only consider predictions of the requested class."""
        preds, gts = self._scene()
        flags, _, total = match_predictions(preds, gts, 0, 1.0)
        assert total == 0
        np.testing.assert_array_equal(flags, [False])

    def test_threshold_is_strict(self) -> None:
        """Should miss when the distance is not below the threshold."""
        preds, gts = self._scene()
        flags, _, _ = match_predictions(preds, gts, 1, 0.05)
        assert not flags.any()


class TestEvaluatePredictions:
    """Tests for the per-class report."""

    def test_oracle_is_perfect(self, gts: list[SceneGroundTruth]) -> None:
        """Should give mAP 1 when predictions echo the GT."""
        report = evaluate_predictions(oracle_predictions(gts), gts, EvalConfig())
        assert report.mAP == pytest.approx(1.0)
        assert report.scenes == 6
        assert report.predictions == sum(len(g.classes) for g in gts)

    def test_grows_with_threshold(self) -> None:
        """Should count a 0.8 m offset as a hit only from the 1.0 m threshold on."""
        lines = np.stack([_line(-8.0), _line(0.0), _line(8.0)])
        gt = SceneGroundTruth(0, np.array([0, 1, 1]), lines)
        pred = ScenePredictions(0, np.array([0, 1, 1]), np.array([0.9, 0.8, 0.7]), lines + [0.8, 0.0])
        report = evaluate_predictions([pred], [gt], EvalConfig())
        for ap in report.classes[:2]:
            assert ap.ap_by_threshold == {"0.5": 0.0, "1": 1.0, "1.5": 1.0}
        assert report.classes[2].ap is None

    def test_thresholds_validated(self) -> None:
        """Should reject unordered thresholds."""
        with pytest.raises(ConfigError):
            EvalConfig(thresholds=(1.0, 0.5))


class TestModelEvaluation:
    """Tests for scoring a model on a split."""

    @pytest.fixture
    def model(self) -> Decoder:
        cfg = DecoderConfig(layers=1, embed_dim=8, heads=2, sampling_points=2, n_points=5, groups=4, bev_channels=3)
        return Decoder(cfg, np.random.default_rng(0))

    def test_predict_scene(self, model: Decoder) -> None:
        """Should emit one scored prediction per group in meters."""
        scene = generate_split(SCENES, 1, seed=0, split="val")[0]
        pred = predict_scene(model, scene)
        assert pred.points.shape == (4, 5, 2)
        assert np.all((pred.scores > 0.0) & (pred.scores < 1.0))
        assert len(predict_scene(model, scene, score_floor=1.1).scores) == 0

    def test_split_thread_invariant(self, model: Decoder) -> None:
        """Should score the same with one or several threads."""
        scenes = generate_split(SCENES, 4, seed=0, split="val")
        one, _, _ = evaluate_split(model, scenes, EvalConfig(), threads=1)
        many, _, _ = evaluate_split(model, scenes, EvalConfig(), threads=3)
        assert one == many

    def test_channel_mismatch(self, model: Decoder) -> None:
        """Should reject a dataset whose grid the model cannot read."""
        scenes = generate_split(SCENES.model_copy(update={"channels": 4}), 1, seed=0, split="val")
        with pytest.raises(ConfigError):
            evaluate_split(model, scenes, EvalConfig())


def test_scene_chamfer_csv(gts: list[SceneGroundTruth], tmp_path: Path) -> None:
    """Should write one zero-distance row per GT for oracle predictions."""
    path = tmp_path / "scene_chamfer.csv"
    write_scene_chamfer_csv(path, oracle_predictions(gts), gts)
    with path.open(encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == sum(len(g.classes) for g in gts)
    assert {r["nearest_chamfer"] for r in rows} == {"0.000000"}
