import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cacemi.errors import DataError
from cacemi.pooling import barnard_rubin_df, pool


def test_identical_inputs():
    pe = pool([1.5] * 5, [0.04] * 5)
    assert pe.point == 1.5 and pe.between_var == 0.0 and pe.total_var == pytest.approx(0.04, abs=1e-15)


def test_hand_example():
    pe = pool([1.0, 3.0], [1.0, 1.0])
    assert (pe.point, pe.within_var, pe.between_var, pe.total_var) == (2.0, 1.0, 2.0, 4.0)


def test_needs_two():
    with pytest.raises(DataError):
        pool([1.0], [1.0])


def test_barnard_rubin_against_formula():
    m, w, b, nu = 10, 0.04, 0.01, 997
    t = w + (1 + 1 / m) * b
    lam = (1 + 1 / m) * b / t
    old = (m - 1) / lam**2
    obs = (nu + 1) / (nu + 3) * nu * (1 - lam)
    assert barnard_rubin_df(m, w, b, nu) == pytest.approx(1 / (1 / old + 1 / obs), rel=1e-14)
    assert barnard_rubin_df(m, w, 0.0, math.inf) == math.inf
    pe = pool(np.linspace(0, 1, m), np.full(m, w), df_complete=nu)
    half = stats.t.ppf(0.975, pe.df) * math.sqrt(pe.total_var)
    assert pe.ci_high - pe.point == pytest.approx(half, rel=1e-12)


vals = st.floats(-100, 100, allow_nan=False)
pos = st.floats(1e-3, 100, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(vals, pos), min_size=2, max_size=20), st.floats(-10, 10).filter(lambda a: abs(a) > 1e-3),
       vals, st.randoms(use_true_random=False))
def test_pooling_identities(pairs, a, b, rnd):
    q = np.array([p[0] for p in pairs])
    u = np.array([p[1] for p in pairs])
    pe = pool(q, u)
    assert pe.total_var == pytest.approx(pe.within_var + (1 + 1 / pe.m) * pe.between_var, abs=1e-12)
    assert pe.total_var >= pe.within_var and pe.between_var >= 0 and pe.df > 0
    # affine equivariance
    pa = pool(a * q + b, a * a * u)
    assert pa.point == pytest.approx(a * pe.point + b, abs=1e-12 * max(1.0, abs(a * pe.point + b)) + 1e-12)
    assert pa.total_var == pytest.approx(a * a * pe.total_var, rel=1e-12)
    # permutation invariance
    perm = list(range(len(q)))
    rnd.shuffle(perm)
    pp = pool(q[perm], u[perm])
    assert pp.point == pytest.approx(pe.point, abs=1e-12)
    assert pp.total_var == pytest.approx(pe.total_var, rel=1e-12)


def test_negligible_between_variance():
    pe = pool([0.0, 8.871612035863776e-100], [1.0, 1.0])
    assert pe.df == math.inf and pe.total_var == pytest.approx(1.0)
