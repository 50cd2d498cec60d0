"""Tests for the GL-SA cost accounting."""

from __future__ import annotations

import csv
from pathlib import Path

import pytest

from eanmap.profiler.complexity import (
    DEFAULT_DIMS,
    DEFAULT_GROUPS,
    DEFAULT_POINTS,
    SWEEP_COLUMNS,
    closed_form_glsa,
    closed_form_vanilla,
    count_glsa,
    count_vanilla,
    memory_proxy,
    predicted_factor,
    scaling_factor,
    sweep,
    write_sweep_csv,
)


class TestClosedForms:
    """Tests for the analytic counts."""

    def test_reference_point(self) -> None:
        """Should give the known step costs at M=100, N=20, d=256."""
        assert closed_form_glsa(100, 20, 256) == {"O1": 1_026_000, "O2": 2_560_000, "O3": 21_506_000}
        assert closed_form_vanilla(100, 20, 256) == 1_024_000_000

    def test_predicted_factor(self) -> None:
        """Should give 2/M + 1/N^2."""
        assert predicted_factor(100, 20) == pytest.approx(0.0225)
        assert predicted_factor(50, 20) == pytest.approx(0.0425)

    def test_memory(self) -> None:
        """Should count attention-matrix elements for both variants."""
        assert memory_proxy(100, 20) == (56_000, 4_000_000)


class TestMeasuredCounts:
    """Tests for counts taken from real forward passes."""

    @pytest.mark.parametrize(("M", "N", "d"), [(3, 4, 8), (5, 2, 16), (25, 10, 64)])
    def test_glsa_matches_closed_form(self, M: int, N: int, d: int) -> None:
        """Should count exactly the analytic step costs."""
        counter = count_glsa(M, N, d)
        expected = closed_form_glsa(M, N, d)
        for step, value in expected.items():
            assert counter.step(step) == value
        assert counter.total == sum(expected.values())
        assert counter.memory_elements == memory_proxy(M, N)[0]

    def test_reference_point_counts(self) -> None:
        """Should count O1, O2 and O3 at M=100, N=20, d=256 with integer equality."""
        counter = count_glsa(100, 20, 256)
        assert counter.step("O1") == 1_026_000
        assert counter.step("O2") == 2_560_000
        assert counter.step("O3") == 21_506_000
        assert counter.total == 25_092_000
        assert counter.memory_elements == 56_000

    def test_vanilla_matches_closed_form(self) -> None:
        """Should count (MN)^2 d for the all-token baseline."""
        counter = count_vanilla(6, 5, 8)
        assert counter.total == closed_form_vanilla(6, 5, 8)
        assert counter.memory_elements == memory_proxy(6, 5)[1]

    def test_projection_outside_total(self) -> None:
        """Should keep linear layers out of the analyzed total."""
        counter = count_glsa(4, 3, 8)
        assert counter.projection_macs > 0
        assert counter.full_total > counter.total

    @pytest.mark.parametrize(("M", "predicted"), [(100, 0.0225), (50, 0.0425)])
    def test_factor_near_prediction(self, M: int, predicted: float) -> None:
        """Should land within a factor of two of the predicted ratio."""
        factor = scaling_factor(M, 20, 256)
        assert factor.predicted == pytest.approx(predicted)
        assert 0.5 < factor.ratio < 2.0


class TestSweep:
    """Tests for the profile table."""

    def test_factor_shrinks_across_default_grid(self) -> None:
        """Should measure a ratio that falls as groups, points or dim grow."""
        rows = sweep()
        measured = {(r.groups, r.points, r.dim): r.measured for r in rows}
        assert len(measured) == len(DEFAULT_GROUPS) * len(DEFAULT_POINTS) * len(DEFAULT_DIMS)
        for N in DEFAULT_POINTS:
            for d in DEFAULT_DIMS:
                by_groups = [measured[(M, N, d)] for M in DEFAULT_GROUPS]
                assert by_groups == sorted(by_groups, reverse=True)
                assert len(set(by_groups)) == len(by_groups)
        for M in DEFAULT_GROUPS:
            for d in DEFAULT_DIMS:
                by_points = [measured[(M, N, d)] for N in DEFAULT_POINTS]
                assert by_points == sorted(by_points, reverse=True)
            for N in DEFAULT_POINTS:
                by_dim = [measured[(M, N, d)] for d in DEFAULT_DIMS]
                assert by_dim == sorted(by_dim, reverse=True)
        for row in rows:
            assert 0.5 < row.measured / row.predicted < 2.0

    def test_grid(self, tmp_path: Path) -> None:
        """Should write one row per grid point with every column filled."""
        rows = sweep([2, 3], [2], [4, 8])
        assert [(r.groups, r.points, r.dim) for r in rows] == [(2, 2, 4), (2, 2, 8), (3, 2, 4), (3, 2, 8)]
        path = tmp_path / "profile.csv"
        write_sweep_csv(path, rows)
        with path.open(encoding="utf-8") as f:
            table = list(csv.reader(f))
        assert table[0] == SWEEP_COLUMNS
        assert len(table) == 5
        assert all(len(line) == len(SWEEP_COLUMNS) for line in table)
        assert int(table[1][6]) == sum(closed_form_glsa(2, 2, 4).values())
