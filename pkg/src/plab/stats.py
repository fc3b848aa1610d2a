"""Rank statistics: Spearman correlation, exact two-sided sign test, mean +/- std."""

from __future__ import annotations

from fractions import Fraction
from math import comb

import numpy as np
from scipy.stats import rankdata


class StatsError(ValueError):
    pass


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    return rankdata(np.asarray(values, dtype=np.float64), method="average")


def spearman_rho(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("spearman_rho needs two 1-D series of equal length")
    if len(x) < 3:
        raise StatsError("spearman_rho needs at least 3 pairs")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        raise StatsError("spearman_rho is undefined for a constant series")
    rho = float(rx @ ry) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho)))


def sign_test_pvalue(k: int, n: int) -> float:
    """Two-sided exact sign test: min(1, 2 * P(X >= max(k, n-k))) with X ~ Bin(n, 1/2)."""
    if not 0 <= k <= n:
        raise StatsError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        return 1.0
    tail = sum(comb(n, i) for i in range(max(k, n - k), n + 1))
    return float(min(Fraction(1), Fraction(2 * tail, 2**n)))


def summarize(values, ddof: int = 0) -> tuple[float, float]:
    """(mean, std); population std unless ``ddof=1``."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise StatsError("cannot summarize an empty collection")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=ddof))
