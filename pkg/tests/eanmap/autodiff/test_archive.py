"""Tests for the EANCKPT1 archive format."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from eanmap.autodiff.archive import MAGIC, load_archive, save_archive
from eanmap.errors import CorruptCheckpointError


@pytest.fixture
def archive(tmp_path: Path) -> Path:
    path = tmp_path / "a.ckpt"
    save_archive(
        path,
        {
            "w": np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0,
            "h": np.array([1.5, -2.25], dtype=np.float32),
        },
        {"epoch": 3, "note": "x"},
    )
    return path


class TestArchive:
    """Tests for save_archive/load_archive."""

    def test_values_and_meta_survive(self, archive: Path) -> None:
        """Should return bit-identical arrays with their dtypes, plus the metadata."""
        arrays, meta = load_archive(archive)
        np.testing.assert_array_equal(arrays["w"], np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0)
        assert arrays["h"].dtype == np.float32
        assert meta == {"epoch": 3, "note": "x"}

    def test_starts_with_magic(self, archive: Path) -> None:
        """Should open with the 8-byte format tag."""
        assert archive.read_bytes()[:8] == MAGIC

    def test_no_temp_file_left(self, archive: Path) -> None:
        """Should rename the temporary file into place."""
        assert not archive.with_suffix(".ckpt.tmp").exists()

    def test_bad_magic(self, archive: Path) -> None:
        """Should reject a file with the wrong tag."""
        blob = bytearray(archive.read_bytes())
        blob[:8] = b"NOTACKPT"
        archive.write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError, match="magic"):
            load_archive(archive)

    def test_truncated_buffers(self, archive: Path) -> None:
        """Should detect missing trailing bytes."""
        archive.write_bytes(archive.read_bytes()[:-4])
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            load_archive(archive)

    def test_too_short_for_header(self, tmp_path: Path) -> None:
        """Should reject a stub file."""
        path = tmp_path / "stub.ckpt"
        path.write_bytes(b"EAN")
        with pytest.raises(CorruptCheckpointError):
            load_archive(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        """Should surface a missing path as FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_archive(tmp_path / "absent.ckpt")
