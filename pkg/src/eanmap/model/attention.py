"""
Grouped local self-attention (GL-SA) and the vanilla all-token baseline.

GL-SA replaces one (M*N)^2 attention with three cheap steps:

1. a learnable local query per group attends over that group's N entries;
2. the M group summaries attend to each other (vanilla attention);
3. each group's N queries attend over their own entries plus the group's
   step-2 summary token (N + 1 keys).
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Any

import numpy as np

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor
from eanmap.errors import ConfigError, DimensionError
from eanmap.model.counter import current_counter, current_trace
from eanmap.model.layers import LayerNorm, Linear, Module, maybe_dropout, parameter
from eanmap.model.query_units import sine_pe

if TYPE_CHECKING:
    from numpy.typing import NDArray


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, n) -> (..., h, T, n / h)"""
    *lead, tokens, dim = x.shape
    y = ops.reshape(x, (*lead, tokens, heads, dim // heads))
    return ops.swapaxes(y, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, T, dh) -> (..., T, h * dh)"""
    *lead, heads, tokens, head_dim = x.shape
    y = ops.swapaxes(x, -2, -3)
    return ops.reshape(y, (*lead, tokens, heads * head_dim))


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, weights)."""
    scores = ops.scale(ops.matmul(q, ops.transpose_last2(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.softmax_lastdim(scores)
    return ops.matmul(weights, v), weights


def _check_heads(dim: int, heads: int) -> None:
    if heads < 1 or dim % heads != 0:
        raise ConfigError(f"heads ({heads}) must divide the embedding dim ({dim})")


def _capture(name: str, value: Tensor, matrix: bool = False) -> None:
    trace = current_trace()
    if trace is None:
        return
    if matrix:
        trace.capture_matrix(name, value.data)
    else:
        trace.capture(name, value.data)


class VanillaSelfAttention(Module):
    """
    Multi-head self-attention over all tokens with a residual connection.

    q = k = x + pos and v = x. Only the score product is reported to the
    counter under `step`; the value product is reported as excluded work.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        _check_heads(dim, heads)
        self.heads = heads
        self.dropout = dropout
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(
        self,
        x: Tensor,
        pos: Tensor | None = None,
        step: str = "vanilla",
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        qk_in = x if pos is None else ops.add(x, pos)
        q = split_heads(self.q(qk_in), self.heads)
        k = split_heads(self.k(qk_in), self.heads)
        v = split_heads(self.v(x), self.heads)
        attended, weights = attend(q, k, v)
        _capture(step, weights, matrix=True)

        counter = current_counter()
        if counter is not None:
            *lead, tokens, head_dim = q.shape
            batch = math.prod(lead)
            macs = batch * tokens * tokens * head_dim
            counter.record(step, score_macs=macs, attention_elements=batch * tokens * tokens)
            counter.exclude(macs)

        return ops.add(x, maybe_dropout(self.out(merge_heads(attended)), self.dropout, rng))


class GroupedLocalSelfAttention(Module):
    """GL-SA over M groups of N queries, followed by residual and layer norm."""

    def __init__(
        self,
        groups: int,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        use_local_queries: bool = True,
        use_group_mean: bool = True,
        improved_local_queries: bool = True,
        dropout: float = 0.0,
    ) -> None:
        _check_heads(dim, heads)
        self.groups = groups
        self.dim = dim
        self.heads = heads
        self.use_local_queries = use_local_queries
        self.use_group_mean = use_group_mean
        self.improved_local_queries = improved_local_queries
        self.dropout = dropout

        if use_local_queries:
            width = 2 * dim if improved_local_queries else dim
            self.L = parameter(rng.normal(0.0, 0.02, size=(groups, width)))
            self.k1 = Linear(dim, dim, rng)
            self.v1 = Linear(dim, dim, rng)
            self.q_lq = Linear(dim, dim, rng)
            if improved_local_queries:
                self.q_lp = Linear(dim, dim, rng)
        if self.has_group_step:
            self.interaction = VanillaSelfAttention(dim, heads, rng, dropout)
            self.kl = Linear(dim, dim, rng)
            self.vl = Linear(dim, dim, rng)
        self.q3 = Linear(dim, dim, rng)
        self.k3 = Linear(dim, dim, rng)
        self.v3 = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    @property
    def has_group_step(self) -> bool:
        return self.use_local_queries or self.use_group_mean

    def _local_stream(self, query: Tensor, keys: Tensor, values: Tensor, counted: bool, name: str) -> Tensor:
        M = self.groups
        q = split_heads(ops.reshape(query, (M, 1, self.dim)), self.heads)
        attended, weights = attend(q, keys, values)
        _capture(name, weights, matrix=True)

        counter = current_counter()
        if counter is not None:
            _, heads, tokens, head_dim = keys.shape
            macs = M * heads * tokens * head_dim
            elements = M * heads * tokens
            if counted:
                counter.record(
                    "O1", score_macs=macs, value_macs=macs, softmax_terms=elements,
                    attention_elements=elements,
                )
            else:
                counter.record("O1", attention_elements=elements)
                counter.exclude(2 * macs)
        return ops.reshape(merge_heads(attended), (M, self.dim))

    def _group_summary(self, qk: Tensor, v: Tensor, rng: np.random.Generator | None) -> Tensor:
        M, n = self.groups, self.dim
        terms: list[Tensor] = []
        if self.use_local_queries:
            keys = split_heads(self.k1(qk), self.heads)
            values = split_heads(self.v1(v), self.heads)
            if self.improved_local_queries:
                lq, lp = ops.split_axis(self.L, [n, n], axis=1)
                psi_q = self._local_stream(self.q_lq(lq), keys, values, True, "step1_q")
                psi_p = self._local_stream(self.q_lp(lp), keys, values, False, "step1_p")
                _capture("psi_q", psi_q)
                _capture("psi_p", psi_p)
                terms.append(ops.scale(ops.add(psi_q, psi_p), 0.5))
            else:
                psi_q = self._local_stream(self.q_lq(self.L), keys, values, True, "step1_q")
                _capture("psi_q", psi_q)
                terms.append(psi_q)
        if self.use_group_mean:
            q_m = ops.mean_axis(qk, axis=1)
            _capture("q_m", q_m)
            terms.append(q_m)

        psi_2 = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
        _capture("psi_2", psi_2)
        summary = self.interaction(psi_2, step="O2", rng=rng)
        _capture("psi_2_prime", summary)
        return ops.reshape(summary, (M, n))

    def __call__(
        self,
        content: Tensor,
        positions: Tensor | NDArray[np.floating[Any]],
        rng: np.random.Generator | None = None,
        zero_step2: bool = False,
    ) -> Tensor:
        """
        content: M x N x n; positions: M x N x 2 normalized anchors.

        The positional encoding is computed from the position values only;
        no gradient reaches the anchors through it.
        """
        M, n = self.groups, self.dim
        if content.ndim != 3 or content.shape[0] != M or content.shape[2] != n:
            raise DimensionError(f"GL-SA expects {M} x N x {n} content, got {content.shape}")
        N = content.shape[1]
        pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions)
        if pos.shape != (M, N, 2):
            raise DimensionError(f"positions {pos.shape} do not match content {content.shape}")

        qk = ops.add(content, Tensor(sine_pe(pos, n), dtype=content.dtype))
        v = content

        q3 = split_heads(self.q3(qk), self.heads)
        k3 = self.k3(qk)
        v3 = self.v3(v)
        if self.has_group_step:
            if zero_step2:
                summary = Tensor(np.zeros((M, n)), dtype=content.dtype)
            else:
                summary = self._group_summary(qk, v, rng)
            k3 = ops.concat_axis([ops.reshape(self.kl(summary), (M, 1, n)), k3], axis=1)
            v3 = ops.concat_axis([ops.reshape(self.vl(summary), (M, 1, n)), v3], axis=1)

        attended, weights = attend(q3, split_heads(k3, self.heads), split_heads(v3, self.heads))
        _capture("step3", weights, matrix=True)
        counter = current_counter()
        if counter is not None:
            keys = k3.shape[1]
            head_dim = n // self.heads
            macs = M * self.heads * N * keys * head_dim
            counter.record(
                "O3",
                score_macs=macs,
                value_macs=macs,
                softmax_terms=M * self.heads * N,
                attention_elements=M * self.heads * N * keys,
            )

        q_hat = merge_heads(attended)
        _capture("q_hat", q_hat)
        residual = ops.add(content, maybe_dropout(self.out(q_hat), self.dropout, rng))
        return self.norm(residual)

    def forward_dual(
        self,
        central: tuple[Tensor, Tensor | NDArray[np.floating[Any]]],
        noncentral: tuple[Tensor, Tensor | NDArray[np.floating[Any]]],
        rng: np.random.Generator | None = None,
        zero_step2: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Run both branches through the same weights; they never attend to each other."""
        if central[0].shape != noncentral[0].shape:
            raise DimensionError(
                f"branch shapes differ: {central[0].shape} vs {noncentral[0].shape}"
            )
        return (
            self(central[0], central[1], rng, zero_step2),
            self(noncentral[0], noncentral[1], rng, zero_step2),
        )


class VanillaBlock(Module):
    """All-token self-attention over M * N queries, then layer norm; GL-SA's drop-in baseline."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        self.dim = dim
        self.attention = VanillaSelfAttention(dim, heads, rng, dropout)
        self.norm = LayerNorm(dim)

    def __call__(
        self,
        content: Tensor,
        positions: Tensor | NDArray[np.floating[Any]],
        rng: np.random.Generator | None = None,
        zero_step2: bool = False,
    ) -> Tensor:
        M, N, n = content.shape
        pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions)
        flat = ops.reshape(content, (M * N, n))
        pe = Tensor(sine_pe(pos.reshape(M * N, 2), n), dtype=content.dtype)
        out = self.attention(flat, pe, step="vanilla", rng=rng)
        return ops.reshape(self.norm(out), (M, N, n))
