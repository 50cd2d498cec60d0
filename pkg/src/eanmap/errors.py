"""Exception hierarchy shared by every eanmap module."""

from __future__ import annotations


class EanError(Exception):
    """Base class for contract, configuration, and data errors."""


class DimensionError(EanError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(EanError):
    """A documented precondition was violated by the caller."""


class ConfigError(EanError):
    """A configuration value is missing, unknown, or infeasible."""


class DegenerateGeometryError(EanError):
    """A polyline has no usable extent (zero length, too few vertices)."""


class CorruptDatasetError(EanError):
    """A dataset file is truncated or does not match its manifest."""


class NumericFaultError(EanError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message: str, layer: int | None = None) -> None:
        super().__init__(message)
        self.layer = layer


class GradCheckError(EanError):
    """An analytic gradient disagrees with its finite-difference estimate."""


class CorruptCheckpointError(EanError):
    """A checkpoint archive has a bad magic string, manifest, or truncated buffers."""
