"""Order-invariant point costs and bipartite matching of predictions to map elements."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.optimize import linear_sum_assignment

from eanmap.errors import ConfigError, ContractError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray


def equivalent_orderings(n_points: int, closed: bool) -> NDArray[np.intp]:
    """
    Index permutations that describe the same element, shape (K, N).

    Open: forward, reversed. Closed: every cyclic shift of the forward
    sequence, then every cyclic shift of the reversed one.
    """
    forward = np.arange(n_points)
    if not closed:
        return np.stack([forward, forward[::-1]])
    backward = forward[::-1]
    shifts = [np.roll(forward, -s) for s in range(n_points)]
    shifts += [np.roll(backward, -s) for s in range(n_points)]
    return np.stack(shifts)


def point_cost(
    pred: NDArray[np.floating[Any]],
    gt: NDArray[np.floating[Any]],
    closed: bool = False,
) -> tuple[float, NDArray[np.intp]]:
    """
    Minimum mean L1 distance over the element's equivalent orderings.

    Returns the cost and the GT index ordering achieving it; the first
    ordering wins ties.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ContractError(f"point_cost needs matching N x 2 inputs, got {pred.shape} and {gt.shape}")
    orderings = equivalent_orderings(len(gt), closed)
    costs = np.abs(gt[orderings] - pred[None]).sum(axis=-1).mean(axis=-1)
    best = int(np.argmin(costs))
    return float(costs[best]), orderings[best]


def point_cost_matrix(
    preds: NDArray[np.floating[Any]],
    gts: NDArray[np.floating[Any]],
    closed: Sequence[bool],
) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
    """Costs (M, G) and best orderings (M, G, N) for every prediction/GT pair."""
    M, N = preds.shape[0], preds.shape[1]
    G = gts.shape[0]
    costs = np.zeros((M, G))
    best = np.zeros((M, G, N), dtype=np.intp)
    for g in range(G):
        orderings = equivalent_orderings(N, closed[g])
        candidates = gts[g][orderings]  # K x N x 2
        per_order = np.abs(candidates[None] - preds[:, None]).sum(axis=-1).mean(axis=-1)
        pick = np.argmin(per_order, axis=1)
        costs[:, g] = per_order[np.arange(M), pick]
        best[:, g] = orderings[pick]
    return costs, best


@dataclass
class Assignment:
    """Prediction rows matched to GT columns; each index appears at most once."""

    rows: NDArray[np.intp]
    cols: NDArray[np.intp]
    orderings: NDArray[np.intp]  # len(rows) x N, GT point order per pair
    unmatched: list[int] = field(default_factory=list)
    cost: float = 0.0

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(self.rows, self.cols, strict=True)]


def hungarian_match(
    class_probs: NDArray[np.floating[Any]],
    pred_points: NDArray[np.floating[Any]],
    gt_classes: Sequence[int] | NDArray[np.integer[Any]],
    gt_points: NDArray[np.floating[Any]],
    gt_closed: Sequence[bool],
    w_cls: float = 2.0,
    w_pts: float = 5.0,
) -> Assignment:
    """Exact minimum-cost matching: w_cls * (-p(class)) + w_pts * point_cost."""
    M = class_probs.shape[0]
    G = len(gt_classes)
    if M < G:
        raise ConfigError(f"{M} query groups cannot cover {G} map elements")
    if G == 0:
        empty = np.zeros(0, dtype=np.intp)
        return Assignment(empty, empty, np.zeros((0, pred_points.shape[1]), dtype=np.intp), list(range(M)))

    point_costs, orderings = point_cost_matrix(pred_points, gt_points, gt_closed)
    cost = -w_cls * class_probs[:, np.asarray(gt_classes, dtype=np.intp)] + w_pts * point_costs
    rows, cols = linear_sum_assignment(cost)
    rows = rows.astype(np.intp)
    cols = cols.astype(np.intp)
    matched = set(rows.tolist())
    return Assignment(
        rows,
        cols,
        orderings[rows, cols],
        [i for i in range(M) if i not in matched],
        float(cost[rows, cols].sum()),
    )
