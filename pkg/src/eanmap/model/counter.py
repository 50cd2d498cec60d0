"""
Operation counting and attention tracing hooks.

Attention code reports its work to whatever `OpCounter` is active in the
current context; outside `counting()` the reports are dropped. Steps follow
the grouped-attention accounting: "O1" (local feature extraction), "O2"
(group interaction), "O3" (within-group interaction), and "vanilla" for the
all-token baseline.
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.autodiff.archive import save_archive

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

    from numpy.typing import NDArray


@dataclass
class OpCounter:
    """
    Exact integer tallies of attention work.

    `steps` holds the analyzed cost per step (score MACs, the value MACs and
    softmax terms the accounting includes). Work the accounting leaves out
    lands in `excluded_macs`; linear layers land in `projection_macs`.
    """

    score_macs: int = 0
    value_macs: int = 0
    softmax_terms: int = 0
    excluded_macs: int = 0
    projection_macs: int = 0
    steps: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    attention_elements: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def record(
        self,
        step: str,
        score_macs: int = 0,
        value_macs: int = 0,
        softmax_terms: int = 0,
        attention_elements: int = 0,
    ) -> None:
        self.score_macs += score_macs
        self.value_macs += value_macs
        self.softmax_terms += softmax_terms
        self.steps[step] += score_macs + value_macs + softmax_terms
        self.attention_elements[step] += attention_elements

    def exclude(self, macs: int) -> None:
        self.excluded_macs += macs

    def project(self, macs: int) -> None:
        self.projection_macs += macs

    @property
    def total(self) -> int:
        return sum(self.steps.values())

    @property
    def full_total(self) -> int:
        return self.total + self.excluded_macs + self.projection_macs

    @property
    def memory_elements(self) -> int:
        return sum(self.attention_elements.values())

    def step(self, name: str) -> int:
        return self.steps.get(name, 0)


@dataclass
class AttentionTrace:
    """Captured attention matrices and intermediate tensors, keyed by name."""

    matrices: dict[str, list[NDArray[np.floating[Any]]]] = field(
        default_factory=lambda: defaultdict(list)
    )
    tensors: dict[str, list[NDArray[np.floating[Any]]]] = field(
        default_factory=lambda: defaultdict(list)
    )

    def capture_matrix(self, name: str, value: NDArray[np.floating[Any]]) -> None:
        self.matrices[name].append(np.array(value, copy=True))

    def capture(self, name: str, value: NDArray[np.floating[Any]]) -> None:
        self.tensors[name].append(np.array(value, copy=True))

    def save(self, path: Path | str) -> None:
        """Write every capture to a checkpoint-format archive."""
        arrays: dict[str, NDArray[Any]] = {}
        for kind, store in (("matrix", self.matrices), ("tensor", self.tensors)):
            for name, values in store.items():
                for i, value in enumerate(values):
                    arrays[f"{kind}.{name}.{i}"] = value
        save_archive(path, arrays, {"kind": "attention_trace"})


_counter: ContextVar[OpCounter | None] = ContextVar("eanmap_op_counter", default=None)
_trace: ContextVar[AttentionTrace | None] = ContextVar("eanmap_attention_trace", default=None)


def current_counter() -> OpCounter | None:
    return _counter.get()


def current_trace() -> AttentionTrace | None:
    return _trace.get()


@contextmanager
def counting(counter: OpCounter | None = None) -> Iterator[OpCounter]:
    """Activate a counter for the enclosed forward passes."""
    active = counter if counter is not None else OpCounter()
    token = _counter.set(active)
    try:
        yield active
    finally:
        _counter.reset(token)


@contextmanager
def tracing(trace: AttentionTrace | None = None) -> Iterator[AttentionTrace]:
    active = trace if trace is not None else AttentionTrace()
    token = _trace.set(active)
    try:
        yield active
    finally:
        _trace.reset(token)
