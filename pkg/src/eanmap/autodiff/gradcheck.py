"""
Finite-difference gradient checks.

Each registered case builds a differentiable function plus random 64-bit
inputs. The analytic gradient of sum(f(x) * w), for a fixed random w, is
compared against central differences; the relative error is
||analytic - numeric|| / max(||analytic||, ||numeric||). A difference whose
norm is at most DEFAULT_ATOL counts as agreement; key biases, for one, have
a true gradient of zero under the shift-invariant softmax.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import structlog

from eanmap.autodiff import ops
from eanmap.autodiff.tensor import Tensor, backward, clear_tape, no_grad

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = structlog.get_logger()

CaseFn = Callable[[Sequence[Tensor]], Tensor]
CaseBuilder = Callable[[np.random.Generator], tuple[CaseFn, list["NDArray[np.float64]"]]]

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_ATOL = 1e-8


@dataclass
class GradCheckCase:
    """A named function family whose builder draws fresh shapes per trial."""

    name: str
    build: CaseBuilder
    trials: int = 3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool
    trials: int
    error: str | None = None


@dataclass
class GradCheckReport:
    results: list[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[GradCheckResult]:
        return [r for r in self.results if not r.passed]


def _objective(fn: CaseFn, arrays: Sequence[NDArray[np.float64]], weight: NDArray[np.float64]) -> float:
    with no_grad():
        out = fn([Tensor(a, dtype=np.float64) for a in arrays])
    return float(np.sum(out.data * weight))


def relative_error(
    analytic: NDArray[np.float64],
    numeric: NDArray[np.float64],
    atol: float = DEFAULT_ATOL,
) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    if diff <= atol:
        return 0.0
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale == 0.0:
        return 0.0
    return diff / scale


def check_gradients(
    fn: CaseFn,
    arrays: Sequence[NDArray[np.float64]],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
) -> float:
    """Return the worst relative error over all inputs of `fn`."""
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(leaves)
    weight = rng.standard_normal(out.shape)
    try:
        backward(ops.sum_all(ops.mul(out, Tensor(weight, dtype=np.float64))))
    finally:
        clear_tape()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        for j in range(leaf.size):
            shifted = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
            flat = shifted[i].reshape(-1)
            flat[j] += step
            plus = _objective(fn, shifted, weight)
            flat[j] -= 2.0 * step
            minus = _objective(fn, shifted, weight)
            numeric.reshape(-1)[j] = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


class GradCheckRegistry:
    """In-memory registry of gradient-check cases."""

    def __init__(self) -> None:
        self._cases: dict[str, GradCheckCase] = {}

    def register(self, case: GradCheckCase) -> None:
        self._cases[case.name] = case
        log.debug("grad_check_registered", name=case.name, trials=case.trials)

    def unregister(self, name: str) -> bool:
        return self._cases.pop(name, None) is not None

    def get(self, name: str) -> GradCheckCase | None:
        return self._cases.get(name)

    def list_all(self) -> list[GradCheckCase]:
        return list(self._cases.values())

    def run(
        self,
        seed: int = 0,
        names: Sequence[str] | None = None,
        tolerance: float = DEFAULT_TOLERANCE,
        threads: int = 1,
    ) -> GradCheckReport:
        """Run cases (all by default). Each case gets its own generator and tape."""
        cases = self.list_all() if names is None else [self._cases[n] for n in names]
        log.info("grad_check_started", cases=len(cases), threads=threads)

        def _run_one(index: int, case: GradCheckCase) -> GradCheckResult:
            rng = np.random.default_rng([seed, index])
            worst = 0.0
            try:
                for _ in range(case.trials):
                    fn, arrays = case.build(rng)
                    worst = max(worst, check_gradients(fn, arrays, rng))
            except Exception as e:
                log.exception("grad_check_errored", name=case.name)
                return GradCheckResult(case.name, float("inf"), False, case.trials, str(e))
            passed = bool(worst < tolerance)
            if not passed:
                log.warning("grad_check_failed", name=case.name, max_rel_error=worst)
            return GradCheckResult(case.name, worst, passed, case.trials)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(_run_one, range(len(cases)), cases))

        report = GradCheckReport(results)
        log.info(
            "grad_check_completed",
            passed=report.passed,
            failures=[r.name for r in report.failures],
        )
        return report


# --- built-in op cases -------------------------------------------------------


def _shape(rng: np.random.Generator, rank: int, low: int = 2, high: int = 5) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(low, high, size=rank))


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> NDArray[np.float64]:
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _unary(op: Callable[[Tensor], Tensor], positive: bool = False, kink: bool = False) -> CaseBuilder:
    def build(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
        shape = _shape(rng, 2)
        if positive:
            x = rng.uniform(0.2, 2.0, size=shape)
        elif kink:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.standard_normal(shape)
        return (lambda t: op(t[0])), [x]

    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor]) -> CaseBuilder:
    def build(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
        shape = _shape(rng, 3)
        return (lambda t: op(t[0], t[1])), [rng.standard_normal(shape), rng.standard_normal(shape)]

    return build


def _build_matmul(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    b, m, k, n = _shape(rng, 4)
    return (lambda t: ops.matmul(t[0], t[1])), [
        rng.standard_normal((b, m, k)),
        rng.standard_normal((k, n)),
    ]


def _build_expand(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    rows, cols = _shape(rng, 2)
    return (lambda t: ops.expand(t[0], (rows, cols))), [rng.standard_normal((1, cols))]


def _build_concat(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    rows, c1, c2 = _shape(rng, 3)
    return (lambda t: ops.concat_axis(t, axis=1)), [
        rng.standard_normal((rows, c1)),
        rng.standard_normal((rows, c2)),
    ]


def _build_split(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    rows, c1, c2 = _shape(rng, 3)

    def fn(t: Sequence[Tensor]) -> Tensor:
        left, right = ops.split_axis(t[0], [c1, c2], axis=1)
        return ops.concat_axis([ops.scale(right, 2.0), ops.mul(left, left)], axis=1)

    return fn, [rng.standard_normal((rows, c1 + c2))]


def _build_reshape(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    a, b, c = _shape(rng, 3)
    return (lambda t: ops.transpose_last2(ops.reshape(t[0], (a * b, c)))), [
        rng.standard_normal((a, b, c))
    ]


def _build_take(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    rows, cols = _shape(rng, 2)
    idx = rng.integers(0, rows, size=rows + 2)
    return (lambda t: ops.take(t[0], idx, axis=0)), [rng.standard_normal((rows, cols))]


def _build_reductions(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    a, b, c = _shape(rng, 3)

    def fn(t: Sequence[Tensor]) -> Tensor:
        s = ops.sum_axis(t[0], axis=0)
        m = ops.mean_axis(t[0], axis=-1, keepdims=True)
        return ops.concat_axis([ops.reshape(s, (b * c,)), ops.reshape(m, (a * b,))], axis=0)

    return fn, [rng.standard_normal((a, b, c))]


def _build_dropout(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    shape = _shape(rng, 2)
    mask_seed = int(rng.integers(0, 2**31))
    return (lambda t: ops.dropout(t[0], 0.3, np.random.default_rng(mask_seed))), [
        rng.standard_normal(shape)
    ]


def _build_bilinear(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    c, h, w = _shape(rng, 3, 2, 6)
    points = rng.uniform(0.1, 0.9, size=(int(rng.integers(2, 6)), 2))
    return (lambda t: ops.bilinear_sample(t[0], t[1])), [rng.standard_normal((c, h, w)), points]


def _build_perceptron(rng: np.random.Generator) -> tuple[CaseFn, list[NDArray[np.float64]]]:
    batch, d_in, d_hidden, d_out = _shape(rng, 4, 2, 5)

    def fn(t: Sequence[Tensor]) -> Tensor:
        x, w1, w2, w3 = t
        h = ops.gelu(ops.matmul(x, w1))
        h = ops.sigmoid(ops.matmul(h, w2))
        return ops.softmax_lastdim(ops.matmul(h, w3))

    return fn, [
        rng.standard_normal((batch, d_in)),
        rng.standard_normal((d_in, d_hidden)),
        rng.standard_normal((d_hidden, d_hidden)),
        rng.standard_normal((d_hidden, d_out)),
    ]


def _builtin_cases() -> list[GradCheckCase]:
    return [
        GradCheckCase("add", _binary(ops.add)),
        GradCheckCase("sub", _binary(ops.sub)),
        GradCheckCase("mul", _binary(ops.mul)),
        GradCheckCase("scale", _unary(lambda x: ops.scale(x, -1.7))),
        GradCheckCase("add_scalar", _unary(lambda x: ops.add_scalar(x, 0.3))),
        GradCheckCase("expand", _build_expand),
        GradCheckCase("sum_mean", _build_reductions),
        GradCheckCase("sum_all", _unary(ops.sum_all)),
        GradCheckCase("concat_axis", _build_concat),
        GradCheckCase("split_axis", _build_split),
        GradCheckCase("reshape_transpose", _build_reshape),
        GradCheckCase("take", _build_take),
        GradCheckCase("relu", _unary(ops.relu, kink=True)),
        GradCheckCase("abs", _unary(ops.abs_, kink=True)),
        GradCheckCase("gelu", _unary(ops.gelu)),
        GradCheckCase("sigmoid", _unary(ops.sigmoid)),
        GradCheckCase(
            "inverse_sigmoid",
            _unary(lambda x: ops.inverse_sigmoid(ops.sigmoid(x))),
        ),
        GradCheckCase("exp", _unary(ops.exp)),
        GradCheckCase("log", _unary(ops.log, positive=True)),
        GradCheckCase("dropout", _build_dropout),
        GradCheckCase("softmax", _unary(ops.softmax_lastdim)),
        GradCheckCase("log_softmax", _unary(ops.log_softmax_lastdim)),
        GradCheckCase("layer_norm", _unary(ops.layer_norm_lastdim)),
        GradCheckCase("matmul", _build_matmul),
        GradCheckCase("bilinear_sample", _build_bilinear),
        GradCheckCase("perceptron", _build_perceptron),
    ]


# Singleton
_registry: GradCheckRegistry | None = None


def get_registry() -> GradCheckRegistry:
    """Get the gradient-check registry, seeded with every op case."""
    global _registry
    if _registry is None:
        _registry = GradCheckRegistry()
        for case in _builtin_cases():
            _registry.register(case)
    return _registry


def new_registry(cases: Sequence[GradCheckCase] = ()) -> GradCheckRegistry:
    """
    Fresh registry holding only `cases`.

    The singleton is process-wide and `register_model_checks` adds to it, so a
    test that registers its own cases on it would leak them into every later
    `get_registry().run()`. Tests build a private registry instead.
    """
    registry = GradCheckRegistry()
    for case in cases:
        registry.register(case)
    return registry
