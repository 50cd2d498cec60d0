"""Vectorized map detection head with anchor neighborhoods and grouped local self-attention."""

from eanmap.errors import EanError

__version__ = "0.1.0"

__all__ = ["EanError", "__version__"]
