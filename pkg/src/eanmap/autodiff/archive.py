"""
EANCKPT1 archive: named arrays plus JSON metadata in one flat file.

Layout: 8-byte magic, u64 little-endian manifest length, UTF-8 JSON manifest,
then the raw little-endian array buffers at the offsets the manifest names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog
from pydantic import BaseModel, ValidationError

from eanmap.errors import CorruptCheckpointError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

log = structlog.get_logger()

MAGIC = b"EANCKPT1"
_HEADER = struct.Struct("<8sQ")


class ArchiveEntry(BaseModel):
    """Where one array lives in the buffer section."""

    dtype: str
    shape: list[int]
    offset: int
    nbytes: int


class ArchiveManifest(BaseModel):
    tensors: dict[str, ArchiveEntry]
    meta: dict[str, Any] = {}


def save_archive(
    path: Path | str,
    arrays: Mapping[str, NDArray[Any]],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write arrays (in insertion order) and JSON-serializable metadata."""
    entries: dict[str, ArchiveEntry] = {}
    buffers: list[bytes] = []
    offset = 0
    for name, array in arrays.items():
        le = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries[name] = ArchiveEntry(
            dtype=le.dtype.str, shape=list(le.shape), offset=offset, nbytes=len(raw)
        )
        buffers.append(raw)
        offset += len(raw)

    manifest = ArchiveManifest(tensors=entries, meta=dict(meta or {}))
    header = manifest.model_dump_json().encode("utf-8")

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(_HEADER.pack(MAGIC, len(header)))
        f.write(header)
        for raw in buffers:
            f.write(raw)
    tmp.replace(target)
    log.debug("archive_saved", path=str(target), tensors=len(entries), nbytes=offset)


def load_archive(path: Path | str) -> tuple[dict[str, NDArray[Any]], dict[str, Any]]:
    """Read an archive back as (arrays, meta); arrays come back bit-exact."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptCheckpointError(f"{path}: file too short for header")
    magic, header_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")

    start = _HEADER.size + header_len
    if len(blob) < start:
        raise CorruptCheckpointError(f"{path}: manifest truncated")
    try:
        manifest = ArchiveManifest.model_validate(json.loads(blob[_HEADER.size : start]))
    except (ValueError, ValidationError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from e

    arrays: dict[str, NDArray[Any]] = {}
    for name, entry in manifest.tensors.items():
        lo = start + entry.offset
        hi = lo + entry.nbytes
        if hi > len(blob):
            raise CorruptCheckpointError(f"{path}: buffer for {name} truncated")
        dtype = np.dtype(entry.dtype)
        expected = int(np.prod(entry.shape, dtype=np.int64)) * dtype.itemsize
        if expected != entry.nbytes:
            raise CorruptCheckpointError(f"{path}: {name} size does not match its shape")
        array = np.frombuffer(blob[lo:hi], dtype=dtype).reshape(entry.shape)
        arrays[name] = array.astype(dtype.newbyteorder("="), copy=True)
    return arrays, manifest.meta
