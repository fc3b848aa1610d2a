import itertools
from math import sqrt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plab.stats import StatsError, average_ranks, sign_test_pvalue, spearman_rho, summarize


def test_spearman_orderings():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0


def test_spearman_five_pair_example():
    dist = [0, 1.318, 1.406, 1.344, 1.353]
    slopes = [0.259, 0.221, 1.089, 0.572, 0.533]
    # brute force: ranks by counting, then the no-ties closed form
    rx = [sum(v < x for v in dist) + 1 for x in dist]
    ry = [sum(v < y for v in slopes) + 1 for y in slopes]
    d2 = sum((a - b) ** 2 for a, b in zip(rx, ry))
    assert 1 - 6 * d2 / (5 * (25 - 1)) == 0.8
    assert abs(spearman_rho(dist, slopes) - 0.8) < 1e-15


def test_spearman_ties_use_average_ranks():
    assert list(average_ranks([3, 1, 3, 2])) == [3.5, 1.0, 3.5, 2.0]
    x, y = [1, 2, 2, 3], [1, 3, 2, 4]
    rx, ry = average_ranks(x), average_ranks(y)
    assert abs(spearman_rho(x, y) - np.corrcoef(rx, ry)[0, 1]) < 1e-15


@pytest.mark.parametrize("xs,ys", [([1, 2], [1, 2]), ([1, 1, 1], [1, 2, 3]), ([1, 2, 3], [1, 2])])
def test_spearman_errors(xs, ys):
    with pytest.raises(StatsError):
        spearman_rho(xs, ys)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=15, unique=True), st.integers(0, 2**31 - 1))
def test_spearman_monotone_invariance(xs, seed):
    rng = np.random.default_rng(seed)
    ys = rng.normal(size=len(xs))
    base = spearman_rho(xs, ys)
    assert -1.0 <= base <= 1.0
    assert abs(spearman_rho(np.exp(np.asarray(xs) / 100), ys) - base) < 1e-12
    assert abs(spearman_rho(xs, ys**3 + 2 * ys) - base) < 1e-12


def test_sign_test_examples():
    assert sign_test_pvalue(8, 9) == 20 / 512 == 0.0390625
    assert sign_test_pvalue(9, 9) == 2 / 512 == 0.00390625
    assert sign_test_pvalue(0, 1) == 1.0
    with pytest.raises(StatsError):
        sign_test_pvalue(5, 4)


@pytest.mark.parametrize("n", range(1, 13))
def test_sign_test_matches_enumeration(n):
    for k in range(n + 1):
        extreme = abs(k - n / 2)
        hits = sum(1 for signs in itertools.product((0, 1), repeat=n) if abs(sum(signs) - n / 2) >= extreme)
        assert sign_test_pvalue(k, n) == hits / 2**n
        assert sign_test_pvalue(k, n) == sign_test_pvalue(n - k, n)


def test_summarize_examples():
    assert summarize([4.2]) == (4.2, 0.0)
    mean, std = summarize([1, 2, 3])
    assert mean == 2.0 and abs(std - sqrt(2 / 3)) < 1e-15
    assert summarize([-1.5, 1.5, -0.5, 0.5])[0] == 0.0
    assert abs(summarize([1, 2, 3], ddof=1)[1] - 1.0) < 1e-15
    with pytest.raises(StatsError):
        summarize([])
