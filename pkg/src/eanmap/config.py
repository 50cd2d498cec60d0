"""Configuration via environment variables."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings

# Find .env relative to this file (project root)
_PROJECT_ROOT = Path(__file__).parent.parent.parent
_ENV_FILE = _PROJECT_ROOT / ".env"


class Settings(BaseSettings):
    """Process-level settings for eanmap runs."""

    # Parallelism cap for scene generation and evaluation (EAN_THREADS)
    threads: int = 1

    log_level: str = "INFO"
    log_format: Literal["console", "json"] = "console"

    model_config = {"env_prefix": "EAN_", "env_file": _ENV_FILE}


@lru_cache
def get_settings() -> Settings:
    """Get settings singleton. Allows override in tests."""
    return Settings()
