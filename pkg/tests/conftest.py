import itertools

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


def brute_force_assignment(cost: np.ndarray):
    """Exhaustive minimum-cost assignment oracle for small matrices.

    Returns (best_cost, pairs) where pairs is the lexicographically smallest
    optimal pair list (sorted by row, then column).
    """
    n, m = cost.shape
    k = min(n, m)
    best = None
    best_pairs = None
    for rows in itertools.combinations(range(n), k):
        for cols in itertools.permutations(range(m), k):
            total = sum(cost[r, c] for r, c in zip(rows, cols))
            pairs = sorted(zip(rows, cols))
            if best is None or total < best - 1e-12 or (abs(total - best) <= 1e-12 and pairs < best_pairs):
                best = total
                best_pairs = pairs
    return best, best_pairs


def finite_difference(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central-difference gradient of a scalar function of a tensor."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x).item()
        flat[i] = orig - eps
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom
