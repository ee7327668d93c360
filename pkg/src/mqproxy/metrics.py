"""Rank and linear correlation metrics with explicit degenerate handling."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class Correlation(NamedTuple):
    value: float
    degenerate: bool


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    return x, y


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson_full(x, y) -> Correlation:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if den == 0.0:
        return Correlation(0.0, True)
    return Correlation(float(np.clip(np.dot(dx, dy) / den, -1.0, 1.0)), False)


def spearman_full(x, y) -> Correlation:
    x, y = _pair(x, y)
    return pearson_full(average_ranks(x), average_ranks(y))


def kendall_full(x, y) -> Correlation:
    """Kendall tau-b, O(n^2)."""
    x, y = _pair(x, y)
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, 1)
    sx, sy = sx[iu], sy[iu]
    n_x = np.count_nonzero(sx)
    n_y = np.count_nonzero(sy)
    if n_x == 0 or n_y == 0:
        return Correlation(0.0, True)
    return Correlation(float(np.sum(sx * sy) / math.sqrt(n_x * n_y)), False)


def pearson(x, y) -> float:
    return pearson_full(x, y).value


def spearman(x, y) -> float:
    return spearman_full(x, y).value


def kendall(x, y) -> float:
    return kendall_full(x, y).value


def top_k_indices(gt, fraction: float) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    m = math.ceil(round(fraction * gt.size, 9))
    if m < 2:
        raise ValueError(f"top-{fraction:g} of {gt.size} items keeps {m} < 2")
    # stable sort on -gt keeps earlier items first among accuracy ties
    return np.argsort(-gt, kind="mergesort")[:m]


def spearman_at_topk(gt, est, fraction: float) -> float:
    """Spearman correlation restricted to the top ``fraction`` of items by ``gt``.

    Both lists are re-ranked within the kept subset, so the value stays in
    [-1, 1]. ``fraction=1.0`` is plain Spearman.
    """
    gt, est = _pair(gt, est)
    keep = top_k_indices(gt, fraction)
    if keep.size == gt.size:
        return spearman(gt, est)
    return spearman(gt[keep], est[keep])


def topk_mean(gt, est, fractions: Sequence[float] = (0.2, 0.5, 1.0)) -> float:
    return float(np.mean([spearman_at_topk(gt, est, t) for t in fractions]))
