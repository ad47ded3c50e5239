"""
Test script for the t-test, Benjamini-Hochberg and LocalFDR selectors.
"""

import numpy as np
import pytest

from baselines import bh_select, group_by_sign, localfdr_select, ttest_select, two_sided_pvalues
from errors import DataError, UsageError
from stats import TwoGroupsModel


def step_up(p_values, q):
    """Reference step-up: reject the k smallest for the largest k with p_(k) <= kq/m."""
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    k = 0
    for rank, i in enumerate(order, start=1):
        if p_values[i] <= rank * q / m:
            k = rank
    if k == 0:
        return set()
    cutoff = p_values[order[k - 1]]
    return {i for i in range(m) if p_values[i] <= cutoff}


def test_two_sided_pvalue_at_critical_value():
    assert two_sided_pvalues(np.array([2.228]), 10)[0] == pytest.approx(0.05, abs=5e-4)
    assert two_sided_pvalues(np.array([0.0]), 10)[0] == 1.0
    p = two_sided_pvalues(np.array([-1.3, 1.3]), 8)
    assert p[0] == p[1]


def test_ttest_select():
    result = ttest_select(np.array([0.1, 2.5, -3.0, 2.0]), 10, 0.05)
    np.testing.assert_array_equal(result.selected, [1, 2])
    assert result.method == "ttest"
    with pytest.raises(UsageError):
        ttest_select(np.zeros(2), 10, 0.0)


def test_bh_examples():
    result = bh_select(np.array([0.01, 0.02, 0.03, 0.04, 0.05]), 0.05)
    np.testing.assert_array_equal(result.selected, [0, 1, 2, 3, 4])
    assert len(bh_select(np.full(4, 0.9), 0.05).selected) == 0
    assert len(bh_select(np.empty(0), 0.1).selected) == 0
    # step-up: a failing middle rank does not stop later passes
    np.testing.assert_array_equal(bh_select(np.array([0.001, 0.04, 0.035, 0.6]), 0.1).selected, [0, 1, 2])


def test_bh_includes_ties_at_cutoff():
    np.testing.assert_array_equal(bh_select(np.array([0.02, 0.02, 0.5]), 0.05).selected, [0, 1])


def test_bh_matches_reference_step_up():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        p = rng.uniform(size=m) ** rng.uniform(0.5, 4.0)
        if rng.random() < 0.3:
            p = np.round(p, 2)
        q = float(rng.uniform(0.01, 0.3))
        assert set(bh_select(p, q).selected.tolist()) == step_up(p.tolist(), q)


def test_bh_rejects_bad_input():
    with pytest.raises(DataError):
        bh_select(np.array([0.1, 1.5]), 0.05)
    with pytest.raises(UsageError):
        bh_select(np.array([0.1]), 1.0)


def test_localfdr_example():
    model = TwoGroupsModel(0.0, 1.0, 0.1,
                           lambda z: np.full(np.shape(z), 0.05),
                           lambda z: np.full(np.shape(z), 0.30))
    result = localfdr_select(np.array([1.0, 2.0]), model, 0.7)
    np.testing.assert_allclose(result.scores, 0.045 / 0.075)
    np.testing.assert_array_equal(result.selected, [0, 1])
    assert len(localfdr_select(np.array([1.0]), model, 0.6).selected) == 0


def test_group_by_sign():
    z = np.array([-1.0, 0.0, 2.0, 3.0])
    bias, lesion = group_by_sign(np.array([0, 1, 3]), z)
    np.testing.assert_array_equal(bias, [0, 1])
    np.testing.assert_array_equal(lesion, [3])
