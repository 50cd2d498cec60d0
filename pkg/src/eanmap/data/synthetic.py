"""
Synthetic BEV scenes: map elements plus a rendered feature grid.

Dividers are quadratic Bezier curves running roughly along y, boundaries
are long gentle curves near the lateral edges, and pedestrian crossings are
rotated rectangles. Channels 0..2 hold a Gaussian rendering of each class;
the remaining channels are zero.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from eanmap.errors import ConfigError
from eanmap.geometry import BEV_X_RANGE, BEV_Y_RANGE, NUM_CLASSES, MapClass, MapElement

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = structlog.get_logger()

# Independent generator streams per split under one seed
SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}

_CURVE_SAMPLES = 24


class SceneConfig(BaseModel):
    """Generator settings; also fixes the BEV grid the model reads."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_points: int = 10
    channels: int = 16
    height: int = 100
    width: int = 50
    max_instances: int = 8

    # Inclusive (min, max) element counts per scene
    dividers: tuple[int, int] = (1, 4)
    boundaries: tuple[int, int] = (0, 2)
    crossings: tuple[int, int] = (0, 2)

    curvature: float = 3.0  # max lateral pull of a divider's control point, meters
    render_sigma: float = 0.75
    noise_sigma: float = 0.05

    @model_validator(mode="after")
    def _check_feasible(self) -> SceneConfig:
        ranges = (self.crossings, self.dividers, self.boundaries)
        if any(lo < 0 or hi < lo for lo, hi in ranges):
            raise ConfigError(f"element count ranges must satisfy 0 <= min <= max: {ranges}")
        if sum(hi for _, hi in ranges) == 0:
            raise ConfigError("scene config requests zero elements of every class")
        if sum(lo for lo, _ in ranges) > self.max_instances:
            raise ConfigError("minimum element counts exceed max_instances")
        if self.channels < NUM_CLASSES:
            raise ConfigError(f"need at least {NUM_CLASSES} channels, got {self.channels}")
        if self.n_points < 2 or self.height < 1 or self.width < 1 or self.max_instances < 1:
            raise ConfigError("n_points >= 2 and positive grid dims are required")
        return self

    def config_hash(self) -> str:
        return compute_hash(self.model_dump_json().encode("utf-8"))


@dataclass
class Scene:
    scene_id: int
    elements: list[MapElement]
    bev_feature: NDArray[np.float32]  # C x H x W
    meta: dict[str, Any] = field(default_factory=dict)


def compute_hash(content: bytes) -> str:
    """Compute SHA256 hash of content with prefix."""
    digest = hashlib.sha256(content).hexdigest()
    return f"sha256:{digest}"


def _as_f32(points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Clip to the BEV range and round to what the record format stores."""
    clipped = np.stack(
        [np.clip(points[:, 0], *BEV_X_RANGE), np.clip(points[:, 1], *BEV_Y_RANGE)], axis=-1
    )
    return clipped.astype(np.float32).astype(np.float64)


def _bezier(p0: NDArray[np.float64], p1: NDArray[np.float64], p2: NDArray[np.float64]) -> NDArray[np.float64]:
    t = np.linspace(0.0, 1.0, _CURVE_SAMPLES)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _divider(cfg: SceneConfig, rng: np.random.Generator) -> MapElement:
    x0 = rng.uniform(-10.0, 10.0)
    y_start = rng.uniform(-30.0, -12.0)
    y_end = rng.uniform(12.0, 30.0)
    p0 = np.array([x0 + rng.uniform(-1.0, 1.0), y_start])
    p1 = np.array([x0 + rng.uniform(-cfg.curvature, cfg.curvature), 0.5 * (y_start + y_end)])
    p2 = np.array([x0 + rng.uniform(-1.0, 1.0), y_end])
    return MapElement(MapClass.DIVIDER, _as_f32(_bezier(p0, p1, p2)))


def _boundary(rng: np.random.Generator) -> MapElement:
    side = rng.choice([-1.0, 1.0])
    x0 = side * rng.uniform(12.0, 14.5)
    p0 = np.array([x0 + rng.uniform(-0.5, 0.5), rng.uniform(-30.0, -24.0)])
    p1 = np.array([x0 + rng.uniform(-1.0, 1.0), rng.uniform(-5.0, 5.0)])
    p2 = np.array([x0 + rng.uniform(-0.5, 0.5), rng.uniform(24.0, 30.0)])
    return MapElement(MapClass.BOUNDARY, _as_f32(_bezier(p0, p1, p2)))


def _crossing(rng: np.random.Generator) -> MapElement:
    center = np.array([rng.uniform(-7.0, 7.0), rng.uniform(-24.0, 24.0)])
    half = np.array([rng.uniform(3.0, 6.0), rng.uniform(1.0, 2.0)])
    angle = rng.uniform(-0.3, 0.3)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]) * half
    return MapElement(MapClass.PED_CROSSING, _as_f32(corners @ rot.T + center), closed=True)


def _draw_elements(cfg: SceneConfig, rng: np.random.Generator) -> list[MapElement]:
    counts = {
        MapClass.DIVIDER: int(rng.integers(cfg.dividers[0], cfg.dividers[1] + 1)),
        MapClass.BOUNDARY: int(rng.integers(cfg.boundaries[0], cfg.boundaries[1] + 1)),
        MapClass.PED_CROSSING: int(rng.integers(cfg.crossings[0], cfg.crossings[1] + 1)),
    }
    if sum(counts.values()) == 0:
        fallback = next(
            c
            for c, (_, hi) in (
                (MapClass.DIVIDER, cfg.dividers),
                (MapClass.BOUNDARY, cfg.boundaries),
                (MapClass.PED_CROSSING, cfg.crossings),
            )
            if hi > 0
        )
        counts[fallback] = 1

    elements: list[MapElement] = []
    elements += [_divider(cfg, rng) for _ in range(counts[MapClass.DIVIDER])]
    elements += [_boundary(rng) for _ in range(counts[MapClass.BOUNDARY])]
    elements += [_crossing(rng) for _ in range(counts[MapClass.PED_CROSSING])]
    return elements[: cfg.max_instances]


def cell_centers(height: int, width: int) -> NDArray[np.float64]:
    """Meter coordinates of every grid cell center, shape (H * W, 2), row-major."""
    xs = BEV_X_RANGE[0] + (np.arange(width) + 0.5) * (BEV_X_RANGE[1] - BEV_X_RANGE[0]) / width
    ys = BEV_Y_RANGE[0] + (np.arange(height) + 0.5) * (BEV_Y_RANGE[1] - BEV_Y_RANGE[0]) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _segments(elem: MapElement) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    v = elem.vertices
    if elem.closed:
        v = np.vstack([v, v[:1]])
    return v[:-1], v[1:]


def distance_to_segments(
    points: NDArray[np.float64], starts: NDArray[np.float64], ends: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Distance from each point to the nearest of the given segments."""
    seg = ends - starts
    length2 = np.maximum((seg * seg).sum(axis=-1), 1e-12)
    rel = points[:, None, :] - starts[None, :, :]
    t = np.clip((rel * seg[None]).sum(axis=-1) / length2, 0.0, 1.0)
    nearest = starts[None] + t[..., None] * seg[None]
    diff = points[:, None, :] - nearest
    return np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)


def render_bev(
    elements: list[MapElement], cfg: SceneConfig, rng: np.random.Generator
) -> NDArray[np.float32]:
    centers = cell_centers(cfg.height, cfg.width)
    grid = np.zeros((cfg.channels, cfg.height, cfg.width), dtype=np.float64)
    for class_id in MapClass:
        members = [e for e in elements if e.class_id == class_id]
        if not members:
            continue
        starts, ends = zip(*(_segments(e) for e in members), strict=True)
        dist = distance_to_segments(centers, np.vstack(starts), np.vstack(ends))
        grid[class_id] = np.exp(-(dist**2) / (2.0 * cfg.render_sigma**2)).reshape(
            cfg.height, cfg.width
        )
    if cfg.noise_sigma > 0.0:
        grid[:NUM_CLASSES] += rng.normal(0.0, cfg.noise_sigma, size=(NUM_CLASSES, cfg.height, cfg.width))
    return grid.astype(np.float32)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Draw one scene; the result depends only on `cfg` and the rng state."""
    elements = _draw_elements(cfg, rng)
    feature = render_bev(elements, cfg, rng)
    return Scene(scene_id, elements, feature, {"noise_sigma": cfg.noise_sigma})


def scene_rng(seed: int, split: str, scene_id: int) -> np.random.Generator:
    if split not in SPLIT_STREAMS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLIT_STREAMS)}")
    return np.random.default_rng([seed, SPLIT_STREAMS[split], scene_id])


def generate_split(
    cfg: SceneConfig,
    count: int,
    seed: int,
    split: str = "train",
    threads: int = 1,
) -> list[Scene]:
    """Generate `count` scenes in parallel; scene i always gets the same stream."""
    if count < 0:
        raise ConfigError(f"scene count must be non-negative, got {count}")

    def _one(scene_id: int) -> Scene:
        scene = generate_scene(cfg, scene_rng(seed, split, scene_id), scene_id)
        scene.meta["seed"] = seed
        return scene

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scenes = list(pool.map(_one, range(count)))
    log.info("split_generated", split=split, scenes=count, seed=seed, threads=threads)
    return scenes
