"""Shared fixtures."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np
import pytest
import structlog

from eanmap.autodiff.tensor import clear_tape, set_default_dtype
from eanmap.config import get_settings


@pytest.fixture(autouse=True)
def _fresh_autodiff_state() -> Iterator[None]:
    """Every test starts and ends in 64-bit mode with an empty tape."""
    set_default_dtype(np.float64)
    clear_tape()
    yield
    clear_tape()
    set_default_dtype(np.float64)


@pytest.fixture(autouse=True)
def _fresh_settings() -> Iterator[None]:
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
    structlog.reset_defaults()
    structlog.contextvars.clear_contextvars()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
