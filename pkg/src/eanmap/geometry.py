"""
Map-element geometry in the ego BEV frame.

Coordinates are meters with x in [-15, 15] (lateral) and y in [-30, 30]
(longitudinal). The model works in the unit square; `to_normalized` and
`from_normalized` convert between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.errors import ContractError, DegenerateGeometryError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

BEV_X_RANGE = (-15.0, 15.0)
BEV_Y_RANGE = (-30.0, 30.0)
BEV_SPAN = np.array([BEV_X_RANGE[1] - BEV_X_RANGE[0], BEV_Y_RANGE[1] - BEV_Y_RANGE[0]])
BEV_ORIGIN = np.array([BEV_X_RANGE[0], BEV_Y_RANGE[0]])


class MapClass(IntEnum):
    """Element classes; the integer is the class id used everywhere."""

    PED_CROSSING = 0
    DIVIDER = 1
    BOUNDARY = 2


NUM_CLASSES = len(MapClass)


@dataclass
class MapElement:
    """A polyline (or closed polygon for crossings) in meters."""

    class_id: int
    vertices: NDArray[np.float64]
    closed: bool = False

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ContractError(f"vertices must be k x 2, got {self.vertices.shape}")
        if self.class_id not in tuple(MapClass):
            raise ContractError(f"unknown class id {self.class_id}")
        if self.closed and self.class_id != MapClass.PED_CROSSING:
            raise ContractError("only pedestrian crossings may be closed")
        if len(self.vertices) < 2:
            raise DegenerateGeometryError("an element needs at least 2 vertices")
        if self.closed and len(np.unique(self.vertices, axis=0)) < 3:
            raise DegenerateGeometryError("a closed element needs at least 3 distinct vertices")
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        if (
            x.min() < BEV_X_RANGE[0]
            or x.max() > BEV_X_RANGE[1]
            or y.min() < BEV_Y_RANGE[0]
            or y.max() > BEV_Y_RANGE[1]
        ):
            raise ContractError("element vertices leave the BEV range")


@dataclass
class ResampledElement:
    class_id: int
    points: NDArray[np.float64]
    spacing: float  # inter-vertex distance d
    closed: bool = False


@dataclass
class GtNeighborhoodSample:
    base_points: NDArray[np.float64]
    perturbed_points: NDArray[np.float64]
    radius: float


def _drop_repeats(vertices: NDArray[np.float64]) -> NDArray[np.float64]:
    keep = np.ones(len(vertices), dtype=bool)
    keep[1:] = np.any(np.diff(vertices, axis=0) != 0.0, axis=1)
    return vertices[keep]


def resample(elem: MapElement, n_points: int) -> ResampledElement:
    """
    Place `n_points` samples at equal arc length along the element.

    Open elements include both endpoints (d = length / (N - 1)). Closed
    elements start at vertex 0 and walk the perimeter in stored order
    (d = perimeter / N), so the last sample does not repeat the first.
    """
    if n_points < 2:
        raise ContractError(f"resample needs N >= 2, got {n_points}")
    path = _drop_repeats(elem.vertices)
    if elem.closed:
        path = np.vstack([path, path[:1]])
        if len(path) > 2 and np.array_equal(path[-2], path[-1]):
            path = path[:-1]
    seg = np.hypot(*np.diff(path, axis=0).T)
    total = float(seg.sum())
    if len(path) < 2 or total <= 0.0:
        raise DegenerateGeometryError("element has zero length")

    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if elem.closed:
        spacing = total / n_points
        targets = np.arange(n_points) * spacing
    else:
        spacing = total / (n_points - 1)
        targets = np.linspace(0.0, total, n_points)
    points = np.stack([np.interp(targets, arc, path[:, 0]), np.interp(targets, arc, path[:, 1])], axis=-1)
    return ResampledElement(elem.class_id, points, spacing, elem.closed)


def uniform_open(rng: np.random.Generator, size: Any = None) -> NDArray[np.float64]:
    """Draws from the open interval (-1, 1)."""
    betas = np.asarray(rng.uniform(-1.0, 1.0, size=size), dtype=np.float64)
    while np.any(betas == -1.0):
        redraw = betas == -1.0
        betas[redraw] = rng.uniform(-1.0, 1.0, size=int(redraw.sum()))
    return betas


def gt_neighborhood_radius(spacing: float, omega: float) -> float:
    return omega * spacing / 2.0


def perturb_in_gt_neighborhood(
    elem: ResampledElement,
    omega: float,
    rng: np.random.Generator | None = None,
    betas: ArrayLike | None = None,
) -> GtNeighborhoodSample:
    """
    Jitter each point inside a disk of radius r = omega * d / 2.

    dx = b1 * r and dy = b2 * sqrt(r^2 - dx^2) with b1, b2 in (-1, 1). The
    samples are not uniform over the disk; they bunch along the x axis.
    omega = 0 gives the identity.
    """
    if not 0.0 <= omega <= 1.0:
        raise ContractError(f"omega must lie in [0, 1], got {omega}")
    n = len(elem.points)
    if betas is None:
        if rng is None:
            raise ContractError("perturb_in_gt_neighborhood needs rng or betas")
        b = uniform_open(rng, (n, 2))
    else:
        b = np.broadcast_to(np.asarray(betas, dtype=np.float64), (n, 2))
    r = gt_neighborhood_radius(elem.spacing, omega)
    dx = b[:, 0] * r
    dy = b[:, 1] * np.sqrt(np.maximum(r * r - dx * dx, 0.0))
    perturbed = elem.points + np.stack([dx, dy], axis=-1)
    return GtNeighborhoodSample(elem.points, perturbed, r)


def chamfer_distance(a: ArrayLike, b: ArrayLike) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    pa = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("chamfer distance needs two non-empty point sets")
    dx = pa[:, None, 0] - pb[None, :, 0]
    dy = pa[:, None, 1] - pb[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    forward = math.fsum(dist.min(axis=1)) / len(pa)
    reverse = math.fsum(dist.min(axis=0)) / len(pb)
    return 0.5 * (forward + reverse)


def square_neighborhood_offset(
    side: float,
    rng: np.random.Generator | None = None,
    size: int | tuple[int, ...] | None = None,
    betas: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Offset (dx, dy) = (b1, b2) * side / 2, strictly inside the square."""
    if side <= 0.0:
        raise ContractError(f"neighborhood side must be positive, got {side}")
    if betas is None:
        if rng is None:
            raise ContractError("square_neighborhood_offset needs rng or betas")
        shape = (2,) if size is None else (*np.atleast_1d(size).tolist(), 2)
        betas = uniform_open(rng, shape)
    return np.asarray(betas, dtype=np.float64) * (side / 2.0)


def to_normalized(points: ArrayLike) -> NDArray[np.float64]:
    """Meters to unit-square coordinates (affine, no clipping)."""
    return (np.asarray(points, dtype=np.float64) - BEV_ORIGIN) / BEV_SPAN


def from_normalized(points: ArrayLike) -> NDArray[np.float64]:
    return np.asarray(points, dtype=np.float64) * BEV_SPAN + BEV_ORIGIN


def offset_to_normalized(offset: ArrayLike) -> NDArray[np.float64]:
    """Meter displacements to unit-square displacements (no translation)."""
    return np.asarray(offset, dtype=np.float64) / BEV_SPAN
