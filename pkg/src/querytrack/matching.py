"""Minimum-cost bipartite matching with a deterministic tie-break."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

# relative slack when testing whether a partial assignment still reaches the optimum
_TIE_RTOL = 1e-9


@dataclass
class MatchResult:
    """One-to-one assignment between prediction and ground-truth indices."""

    pairs: list[tuple[int, int]]
    unmatched_pred: list[int] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)

    def pred_to_gt(self) -> dict[int, int]:
        return {p: g for p, g in self.pairs}

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in self.pairs))


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost assignment of ``min(n, m)`` pairs.

    Ties between equally cheap assignments break deterministically: the pair
    list is the lexicographically smallest optimal one (lowest row index
    first, then lowest column index).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult(pairs=[], unmatched_pred=list(range(n)), unmatched_gt=list(range(m)))
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    best = _optimum(cost)
    k = min(n, m)
    tol = _TIE_RTOL * max(1.0, abs(best)) + 1e-12

    pairs: list[tuple[int, int]] = []
    rows_left = list(range(n))
    cols_left = list(range(m))
    remaining = best
    for i in range(n):
        if len(pairs) == k:
            break
        rows_after = [r for r in rows_left if r > i]
        need = k - len(pairs)
        chosen = None
        for j in cols_left:
            sub = cost[np.ix_(rows_after, [c for c in cols_left if c != j])]
            if min(sub.shape) < need - 1:
                continue
            if abs(cost[i, j] + _optimum(sub) - remaining) <= tol:
                chosen = j
                break
        if chosen is not None:
            pairs.append((i, chosen))
            cols_left.remove(chosen)
            remaining -= cost[i, chosen]
        # else: row i stays unmatched (only possible when n > m)
        rows_left.remove(i)

    matched_rows = {p for p, _ in pairs}
    matched_cols = {g for _, g in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_pred=[r for r in range(n) if r not in matched_rows],
        unmatched_gt=[c for c in range(m) if c not in matched_cols],
    )
