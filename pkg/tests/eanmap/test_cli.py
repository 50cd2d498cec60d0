"""Tests for the `ean` command line."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from eanmap.autodiff.archive import load_archive
from eanmap.cli import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, build_parser, cmd_grad_check, main
from eanmap.data.storage import read_manifest
from eanmap.errors import GradCheckError

TINY = {
    "scene": {
        "n_points": 4,
        "channels": 3,
        "height": 8,
        "width": 6,
        "max_instances": 3,
        "dividers": [1, 2],
        "boundaries": [0, 1],
        "crossings": [0, 0],
    },
    "decoder": {
        "layers": 1,
        "embed_dim": 8,
        "heads": 2,
        "sampling_points": 2,
        "n_points": 4,
        "groups": 3,
        "bev_channels": 3,
    },
    "train": {"epochs": 1, "batch_size": 2, "train_scenes": 4, "val_scenes": 2},
}


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return path


class TestParser:
    """Tests for argument parsing."""

    def test_common_options(self) -> None:
        """Should accept shared options on every command."""
        args = build_parser().parse_args(["grad-check", "--seed", "7", "--set", "a.b=1", "--set", "c.d=2"])
        assert args.seed == 7
        assert args.overrides == ["a.b=1", "c.d=2"]

    def test_negative_seed(self) -> None:
        """Should reject seeds outside u64."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["grad-check", "--seed", "-1"])

    def test_command_required(self) -> None:
        """Should refuse to run without a command."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestCommands:
    """Tests for the end-to-end command flow."""

    def test_generate_train_evaluate(
        self, config_file: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Should chain gen-data, train and eval through the file system."""
        data = tmp_path / "data"
        run = tmp_path / "run"
        common = ["--config", str(config_file), "--seed", "3"]

        assert main(["gen-data", *common, "--out", str(data)]) == EXIT_OK
        manifest = read_manifest(data)
        assert manifest.splits["train"].scene_count == 4
        assert manifest.splits["val"].scene_count == 2

        assert main(["train", *common, "--data", str(data), "--out", str(run)]) == EXIT_OK
        assert (run / "final.ckpt").exists()

        code = main(
            ["eval", *common, "--data", str(data), "--checkpoint", str(run / "final.ckpt"), "--out", str(run)]
        )
        assert code == EXIT_OK
        report = json.loads((run / "eval_report.json").read_text(encoding="utf-8"))
        assert 0.0 <= report["mAP"] <= 1.0
        assert report["scenes"] == 2
        assert (run / "scene_chamfer.csv").exists()
        assert "mAP" in capsys.readouterr().out

    def test_profile(self, tmp_path: Path) -> None:
        """Should write the sweep table."""
        out = tmp_path / "profile"
        code = main(["profile", "--groups", "2", "3", "--points", "2", "--dims", "4", "--out", str(out)])
        assert code == EXIT_OK
        with (out / "profile.csv").open(encoding="utf-8") as f:
            assert len(list(csv.reader(f))) == 3

    def test_profile_trace_out(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Should dump the GL-SA attention matrices of the first grid point."""
        trace = tmp_path / "trace.ckpt"
        grid = ["--groups", "2", "3", "--points", "2", "--dims", "4"]
        code = main(["profile", *grid, "--out", str(tmp_path), "--trace-out", str(trace)])
        assert code == EXIT_OK
        arrays, meta = load_archive(trace)
        assert meta == {"kind": "attention_trace"}
        assert arrays["matrix.step3.0"].shape == (2, 1, 2, 3)
        assert arrays["matrix.O2.0"].shape == (1, 2, 2)
        np.testing.assert_allclose(arrays["matrix.step3.0"].sum(axis=-1), 1.0, atol=1e-6)
        assert "trace" in capsys.readouterr().out

    def test_grad_check_subset(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Should run only the named cases and pass."""
        assert main(["grad-check", "--only", "add", "matmul"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "add" in out
        assert "matmul" in out
        assert "softmax" not in out

    def test_grad_check_failure_status(self) -> None:
        """Should exit 1 when a case misses the tolerance."""
        assert main(["grad-check", "--only", "add", "--tolerance", "-1"]) == EXIT_CHECK_FAILED

    def test_grad_check_failure_raises(self) -> None:
        """Should report a failed case as GradCheckError from the command."""
        args = build_parser().parse_args(["grad-check", "--only", "add", "--tolerance", "-1"])
        with pytest.raises(GradCheckError, match="add"):
            cmd_grad_check(args, threads=1)

    def test_grad_check_decoder_case(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Should pass the tiny end-to-end decoder case on a fresh build."""
        assert main(["grad-check", "--only", "decoder_loss"]) == EXIT_OK
        assert "decoder_loss" in capsys.readouterr().out

    def test_grad_check_unknown_case(self) -> None:
        """Should exit 2 for case names that do not exist."""
        assert main(["grad-check", "--only", "nope"]) == EXIT_ERROR

    def test_unknown_config_key(self, tmp_path: Path) -> None:
        """Should exit 2 on a bad override."""
        assert main(["gen-data", "--set", "decoder.nope=1", "--out", str(tmp_path)]) == EXIT_ERROR

    def test_missing_checkpoint(self, config_file: Path, tmp_path: Path) -> None:
        """Should exit 2 when the checkpoint does not exist."""
        code = main(
            [
                "eval",
                "--config",
                str(config_file),
                "--data",
                str(tmp_path),
                "--checkpoint",
                str(tmp_path / "missing.ckpt"),
            ]
        )
        assert code == EXIT_ERROR
