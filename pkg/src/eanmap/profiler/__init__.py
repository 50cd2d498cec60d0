"""Attention cost accounting."""

from eanmap.model.counter import OpCounter
from eanmap.profiler.complexity import (
    ScalingFactor,
    count_glsa,
    count_vanilla,
    memory_proxy,
    scaling_factor,
    sweep,
    trace_glsa,
    write_sweep_csv,
)

__all__ = [
    "OpCounter",
    "ScalingFactor",
    "count_glsa",
    "count_vanilla",
    "memory_proxy",
    "scaling_factor",
    "sweep",
    "trace_glsa",
    "write_sweep_csv",
]
