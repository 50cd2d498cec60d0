"""
On-disk dataset splits.

A dataset directory holds manifest.json plus one `<split>.bin` record file
per split. Each record is:

    u64 record length (bytes after this field)
    u64 scene_id
    u16 element count
    per element: u8 class, u8 closed, u16 vertex count, f32 (x, y) pairs
    C * H * W f32 grid

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import structlog
from pydantic import BaseModel, Field, ValidationError

from eanmap.data.synthetic import Scene, SceneConfig, compute_hash, generate_split
from eanmap.errors import CorruptDatasetError
from eanmap.geometry import MapElement

if TYPE_CHECKING:
    from collections.abc import Sequence

log = structlog.get_logger()

MANIFEST_NAME = "manifest.json"

_U64 = struct.Struct("<Q")
_SCENE_HEAD = struct.Struct("<QH")
_ELEM_HEAD = struct.Struct("<BBH")


class SplitManifest(BaseModel):
    """What a split file holds; readable without touching the grids."""

    name: str
    file: str
    scene_count: int
    n_points: int
    channels: int
    height: int
    width: int
    seed: int | None = None
    noise_sigma: float
    config_hash: str
    content_hash: str
    scene_config: SceneConfig


class DatasetManifest(BaseModel):
    version: int = 1
    splits: dict[str, SplitManifest] = Field(default_factory=dict)


def encode_scene(scene: Scene) -> bytes:
    body = bytearray(_SCENE_HEAD.pack(scene.scene_id, len(scene.elements)))
    for elem in scene.elements:
        body += _ELEM_HEAD.pack(int(elem.class_id), int(elem.closed), len(elem.vertices))
        body += elem.vertices.astype("<f4").tobytes()
    body += np.ascontiguousarray(scene.bev_feature, dtype="<f4").tobytes()
    return _U64.pack(len(body)) + bytes(body)


def encode_split(scenes: Sequence[Scene]) -> bytes:
    return b"".join(encode_scene(s) for s in scenes)


def decode_split(blob: bytes, manifest: SplitManifest) -> list[Scene]:
    grid_shape = (manifest.channels, manifest.height, manifest.width)
    grid_bytes = 4 * manifest.channels * manifest.height * manifest.width
    scenes: list[Scene] = []
    pos = 0
    try:
        while pos < len(blob):
            (length,) = _U64.unpack_from(blob, pos)
            pos += _U64.size
            end = pos + length
            if end > len(blob):
                raise CorruptDatasetError(f"record at byte {pos} runs past end of file")
            scene_id, n_elements = _SCENE_HEAD.unpack_from(blob, pos)
            cursor = pos + _SCENE_HEAD.size
            elements: list[MapElement] = []
            for _ in range(n_elements):
                class_id, closed, n_vertices = _ELEM_HEAD.unpack_from(blob, cursor)
                cursor += _ELEM_HEAD.size
                raw = np.frombuffer(blob, dtype="<f4", count=2 * n_vertices, offset=cursor)
                cursor += 8 * n_vertices
                vertices = raw.reshape(n_vertices, 2).astype(np.float64)
                elements.append(MapElement(class_id, vertices, bool(closed)))
            if end - cursor != grid_bytes:
                raise CorruptDatasetError(f"scene {scene_id}: grid size does not match manifest")
            grid = np.frombuffer(blob, dtype="<f4", count=grid_bytes // 4, offset=cursor)
            scenes.append(
                Scene(
                    scene_id,
                    elements,
                    grid.reshape(grid_shape).astype(np.float32),
                    {"seed": manifest.seed, "noise_sigma": manifest.noise_sigma},
                )
            )
            pos = end
    except (struct.error, ValueError) as e:
        raise CorruptDatasetError(f"split {manifest.name!r} is truncated or malformed") from e
    if len(scenes) != manifest.scene_count:
        raise CorruptDatasetError(
            f"split {manifest.name!r} holds {len(scenes)} scenes, manifest says {manifest.scene_count}"
        )
    return scenes


def read_manifest(path: Path | str) -> DatasetManifest:
    """Load manifest.json only; grids stay on disk."""
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptDatasetError(f"{manifest_path}: unreadable manifest") from e


def save_split(
    scenes: Sequence[Scene],
    path: Path | str,
    split: str,
    cfg: SceneConfig,
    seed: int | None = None,
) -> SplitManifest:
    """Write a split file and merge its entry into the directory manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blob = encode_split(scenes)
    file_name = f"{split}.bin"
    (root / file_name).write_bytes(blob)

    entry = SplitManifest(
        name=split,
        file=file_name,
        scene_count=len(scenes),
        n_points=cfg.n_points,
        channels=cfg.channels,
        height=cfg.height,
        width=cfg.width,
        seed=seed,
        noise_sigma=cfg.noise_sigma,
        config_hash=cfg.config_hash(),
        content_hash=compute_hash(blob),
        scene_config=cfg,
    )
    manifest = read_manifest(root) if (root / MANIFEST_NAME).exists() else DatasetManifest()
    manifest.splits[split] = entry
    (root / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    log.info("split_saved", split=split, scenes=len(scenes), path=str(root), nbytes=len(blob))
    return entry


def load_split(path: Path | str, split: str) -> list[Scene]:
    """Read a split back, checking the file against the manifest hash first."""
    root = Path(path)
    manifest = read_manifest(root)
    if split not in manifest.splits:
        raise CorruptDatasetError(f"{root}: manifest has no split {split!r}")
    entry = manifest.splits[split]
    blob = (root / entry.file).read_bytes()
    if compute_hash(blob) != entry.content_hash:
        raise CorruptDatasetError(f"{root / entry.file}: content hash does not match manifest")
    scenes = decode_split(blob, entry)
    log.debug("split_loaded", split=split, scenes=len(scenes))
    return scenes


def verify_split(path: Path | str, split: str, threads: int = 1) -> bool:
    """Regenerate a split from its recorded seed and config; compare hashes."""
    entry = read_manifest(path).splits.get(split)
    if entry is None:
        raise CorruptDatasetError(f"{path}: manifest has no split {split!r}")
    if entry.seed is None:
        raise CorruptDatasetError(f"split {split!r} has no recorded seed")
    scenes = generate_split(entry.scene_config, entry.scene_count, entry.seed, split, threads)
    regenerated = compute_hash(encode_split(scenes))
    ok = regenerated == entry.content_hash
    log.info("split_verified", split=split, match=ok)
    return ok
