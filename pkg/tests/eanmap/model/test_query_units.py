"""Tests for grouped anchor query units."""

from __future__ import annotations

import numpy as np
import pytest

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import backward
from eanmap.errors import ConfigError, ContractError
from eanmap.geometry import BEV_SPAN
from eanmap.model.query_units import QueryUnits, sine_pe


@pytest.fixture
def units(rng: np.random.Generator) -> QueryUnits:
    q = QueryUnits(groups=3, n_points=5, dim=8, rng=rng)
    assert q.gp is not None
    q.gp.data = rng.normal(0.0, 0.1, size=(3, 2))
    return q


class TestSinePE:
    """Tests for the sine positional encoding."""

    def test_shape_and_origin(self) -> None:
        """Should emit dim features with sin = 0, cos = 1 at the origin."""
        pe = sine_pe(np.zeros((2, 3, 2)), 8)
        assert pe.shape == (2, 3, 8)
        np.testing.assert_allclose(pe[..., 0::2], 0.0)
        np.testing.assert_allclose(pe[..., 1::2], 1.0)

    def test_axes_are_separate(self) -> None:
        """Should put x features before y features."""
        pe = sine_pe(np.array([[0.25, 0.0]]), 8)
        assert pe[0, 0] == pytest.approx(1.0)  # sin(2*pi*0.25)
        np.testing.assert_allclose(pe[0, 4:], [0.0, 1.0, 0.0, 1.0])

    def test_dim_must_be_divisible_by_four(self) -> None:
        """Should reject dims that do not split into sin/cos per axis."""
        with pytest.raises(ConfigError):
            sine_pe(np.zeros((1, 2)), 6)


class TestQueryUnits:
    """Tests for assembling central and non-central queries."""

    def test_central_anchor_is_template_plus_group(self, units: QueryUnits) -> None:
        """Should place unit (i, j) at P[j] + gp[i]."""
        out = units.assemble()
        assert units.P is not None
        assert units.gp is not None
        expected = units.P.data[None, :, :] + units.gp.data[:, None, :]
        np.testing.assert_allclose(out.central.data, expected)
        assert out.noncentral is None

    def test_content_is_template_plus_group(self, units: QueryUnits) -> None:
        """Should build content C[j] + gc[i]."""
        out = units.assemble()
        np.testing.assert_allclose(
            out.content.data, units.C.data[None, :, :] + units.gc.data[:, None, :]
        )

    def test_noncentral_inside_square(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should offset non-central anchors by less than a/2 per axis (in meters)."""
        units.resample_noncentral(0.5, rng)
        out = units.assemble(with_noncentral=True)
        assert out.noncentral is not None
        meters = (out.noncentral.data - out.central.data) * BEV_SPAN
        assert np.all(np.abs(meters) < 0.25)

    def test_both_branches_share_content(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should hand both branches the very same content tensor."""
        units.resample_noncentral(0.5, rng)
        out = units.assemble(with_noncentral=True)
        # one content tensor is all the branches get
        assert out.content.shape == (3, 5, 8)
        assert out.noncentral is not None
        assert out.noncentral.shape == out.central.shape

    def test_offsets_carry_no_gradient(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should send non-central gradients to P and gp only, never to offsets."""
        units.resample_noncentral(0.5, rng)
        out = units.assemble(with_noncentral=True)
        assert out.noncentral is not None
        backward(ops.sum_all(out.noncentral))
        assert units.P is not None
        assert units.gp is not None
        np.testing.assert_allclose(units.P.grad, np.full((5, 2), 3.0))
        np.testing.assert_allclose(units.gp.grad, np.full((3, 2), 5.0))

    def test_fresh_offsets_each_resample(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should redraw offsets per call."""
        units.resample_noncentral(0.5, rng)
        first = units.offsets
        units.resample_noncentral(0.5, rng)
        assert first is not None
        assert units.offsets is not None
        assert not np.array_equal(first, units.offsets)

    def test_random_mode_covers_plane(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should place random-mode anchors anywhere in the unit square."""
        units.resample_noncentral(0.5, rng, mode="random")
        out = units.assemble(with_noncentral=True)
        assert out.noncentral is not None
        assert out.noncentral.data.min() >= 0.0
        assert out.noncentral.data.max() < 1.0
        assert units.offsets is None

    def test_noncentral_needs_placements(self, units: QueryUnits) -> None:
        """Should refuse a twin assembly before any resample."""
        with pytest.raises(ContractError):
            units.assemble(with_noncentral=True)

    def test_set_offsets_shape(self, units: QueryUnits) -> None:
        """Should validate explicit offsets."""
        with pytest.raises(ContractError):
            units.set_offsets(np.zeros((3, 4, 2)))

    def test_unknown_mode(self, units: QueryUnits, rng: np.random.Generator) -> None:
        """Should reject an unknown placement mode."""
        with pytest.raises(ConfigError):
            units.resample_noncentral(0.5, rng, mode="grid")  # type: ignore[arg-type]


class TestLearnedQueries:
    """Tests for query units without anchor parameters."""

    def test_no_anchor_parameters(self, rng: np.random.Generator) -> None:
        """Should own C, gc and a reference head instead of P and gp."""
        units = QueryUnits(groups=3, n_points=5, dim=8, rng=rng, anchored=False)
        names = {name for name, _ in units.named_parameters()}
        assert names == {"C", "gc", "reference.weight", "reference.bias"}

    def test_positions_follow_content(self, rng: np.random.Generator) -> None:
        """Should predict each position from its content, inside the unit square."""
        units = QueryUnits(groups=3, n_points=5, dim=8, rng=rng, anchored=False)
        out = units.assemble()
        assert units.reference is not None
        expected = 1.0 / (1.0 + np.exp(-units.reference(out.content).data))
        np.testing.assert_allclose(out.central.data, expected)
        assert out.central.shape == (3, 5, 2)
        assert np.all((out.central.data > 0.0) & (out.central.data < 1.0))

    def test_positions_train_the_reference_head(self, rng: np.random.Generator) -> None:
        """Should send position gradients into the reference head and the content."""
        units = QueryUnits(groups=3, n_points=5, dim=8, rng=rng, anchored=False)
        backward(ops.sum_all(units.assemble().central))
        assert units.reference is not None
        assert units.reference.weight.grad is not None
        assert units.C.grad is not None
        assert np.abs(units.C.grad).sum() > 0.0
