"""
Instrumented attention cost: GL-SA against vanilla self-attention.

Counts come from real forward passes under `counting()`; the closed forms
below are what those counts must equal exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import structlog

from eanmap.autodiff.tensor import Tensor, no_grad
from eanmap.model.attention import GroupedLocalSelfAttention, VanillaBlock
from eanmap.model.counter import AttentionTrace, OpCounter, counting, tracing

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

    from numpy.typing import NDArray

log = structlog.get_logger()

DEFAULT_GROUPS = (25, 50, 100)
DEFAULT_POINTS = (10, 20)
DEFAULT_DIMS = (64, 256)

SWEEP_COLUMNS = [
    "M", "N", "d", "O1", "O2", "O3", "O_GL", "O_van", "measured_∂", "predicted_∂",
    "full_glsa", "full_van", "glsa_seconds", "vanilla_seconds",
]  # fmt: skip


def _inputs(groups: int, points: int, dim: int, seed: int) -> tuple[np.random.Generator, Tensor, NDArray[np.float64]]:
    rng = np.random.default_rng(seed)
    content = Tensor(rng.standard_normal((groups, points, dim)))
    positions = rng.uniform(0.0, 1.0, size=(groups, points, 2))
    return rng, content, positions


def count_glsa(groups: int, points: int, dim: int, heads: int = 1, seed: int = 0) -> OpCounter:
    """Counter filled by one GL-SA forward pass over `groups` x `points` queries."""
    rng, content, positions = _inputs(groups, points, dim, seed)
    module = GroupedLocalSelfAttention(groups, dim, heads, rng)
    with no_grad(), counting() as counter:
        module(content, positions)
    return counter


def count_vanilla(groups: int, points: int, dim: int, heads: int = 1, seed: int = 0) -> OpCounter:
    """Counter filled by one all-token self-attention pass over the same queries."""
    rng, content, positions = _inputs(groups, points, dim, seed)
    module = VanillaBlock(dim, heads, rng)
    with no_grad(), counting() as counter:
        module(content, positions)
    return counter


def trace_glsa(groups: int, points: int, dim: int, heads: int = 1, seed: int = 0) -> AttentionTrace:
    """Attention matrices and step outputs captured from one GL-SA forward pass."""
    rng, content, positions = _inputs(groups, points, dim, seed)
    module = GroupedLocalSelfAttention(groups, dim, heads, rng)
    with no_grad(), tracing() as trace:
        module(content, positions)
    return trace


def closed_form_glsa(groups: int, points: int, dim: int) -> dict[str, int]:
    M, N, d = groups, points, dim
    return {
        "O1": M * (2 * N * d + N),
        "O2": M * M * d,
        "O3": M * (2 * N * (N + 1) * d + N),
    }


def closed_form_vanilla(groups: int, points: int, dim: int) -> int:
    return (groups * points) ** 2 * dim


def predicted_factor(groups: int, points: int) -> float:
    return 2.0 / groups + 1.0 / points**2


@dataclass
class ScalingFactor:
    measured: float
    predicted: float

    @property
    def ratio(self) -> float:
        return self.measured / self.predicted


def scaling_factor(groups: int, points: int, dim: int, heads: int = 1) -> ScalingFactor:
    glsa = count_glsa(groups, points, dim, heads)
    vanilla = count_vanilla(groups, points, dim, heads)
    return ScalingFactor(glsa.total / vanilla.total, predicted_factor(groups, points))


def memory_proxy(groups: int, points: int) -> tuple[int, int]:
    """Attention-matrix element counts (GL-SA, vanilla) for single-head attention."""
    M, N = groups, points
    return 2 * M * N + M * M + M * N * (N + 1), (M * N) ** 2


@dataclass
class SweepRow:
    groups: int
    points: int
    dim: int
    glsa: OpCounter
    vanilla: OpCounter
    glsa_seconds: float
    vanilla_seconds: float

    @property
    def measured(self) -> float:
        return self.glsa.total / self.vanilla.total

    @property
    def predicted(self) -> float:
        return predicted_factor(self.groups, self.points)

    def as_csv(self) -> list[str | int]:
        return [
            self.groups,
            self.points,
            self.dim,
            self.glsa.step("O1"),
            self.glsa.step("O2"),
            self.glsa.step("O3"),
            self.glsa.total,
            self.vanilla.total,
            f"{self.measured:.6g}",
            f"{self.predicted:.6g}",
            self.glsa.full_total,
            self.vanilla.full_total,
            f"{self.glsa_seconds:.6f}",
            f"{self.vanilla_seconds:.6f}",
        ]


def _timed(fn: Callable[[int, int, int], OpCounter], M: int, N: int, d: int) -> tuple[OpCounter, float]:
    start = time.perf_counter()
    counter = fn(M, N, d)
    return counter, time.perf_counter() - start


def sweep(
    groups: Iterable[int] = DEFAULT_GROUPS,
    points: Iterable[int] = DEFAULT_POINTS,
    dims: Iterable[int] = DEFAULT_DIMS,
) -> list[SweepRow]:
    rows: list[SweepRow] = []
    for M in groups:
        for N in points:
            for d in dims:
                glsa, glsa_s = _timed(count_glsa, M, N, d)
                vanilla, vanilla_s = _timed(count_vanilla, M, N, d)
                rows.append(SweepRow(M, N, d, glsa, vanilla, glsa_s, vanilla_s))
                log.info("sweep_point", M=M, N=N, d=d, measured=rows[-1].measured)
    return rows


def write_sweep_csv(path: Path | str, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
