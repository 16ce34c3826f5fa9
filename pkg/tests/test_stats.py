import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special
from scipy import stats as sps

from volharm.errors import DegenerateDifferences, LengthMismatch
from volharm.stats import betainc, paired_t_test, t_two_sided_p


def t_pdf(x, df):
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def quadrature_two_sided_p(t, df):
    # integrate the density over the upper tail; independent of any beta-function code
    tail, _ = integrate.quad(t_pdf, abs(t), np.inf, args=(df,), epsabs=1e-14, epsrel=1e-12)
    return 2.0 * tail


def test_betainc_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a, b = rng.uniform(0.1, 30, 2)
        x = rng.uniform()
        assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-12)


def test_betainc_endpoints():
    assert betainc(2.0, 3.0, 0.0) == 0.0
    assert betainc(2.0, 3.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        betainc(2.0, 3.0, 1.5)


def test_zero_mean_difference():
    res = paired_t_test([1, 0, 1, 0], [0, 1, 0, 1])
    assert res.t == 0.0
    assert res.df == 3
    assert res.p == pytest.approx(1.0, abs=1e-12)


def test_constant_difference_is_degenerate():
    with pytest.raises(DegenerateDifferences):
        paired_t_test([2, 3, 4, 5], [1, 2, 3, 4])


def test_one_to_five_against_zero():
    res = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert res.t == pytest.approx(3 / (math.sqrt(2.5) / math.sqrt(5)), rel=1e-12)
    assert res.t == pytest.approx(4.2426, abs=5e-5)
    assert res.df == 4
    oracle = quadrature_two_sided_p(res.t, 4)
    assert res.p == pytest.approx(oracle, abs=1e-10)
    assert res.p == pytest.approx(0.0132, abs=5e-5)


def test_p_values_against_two_oracles():
    rng = np.random.default_rng(7)
    for _ in range(200):
        df = int(rng.integers(1, 60))
        t = float(rng.normal(scale=4))
        p = t_two_sided_p(t, df)
        assert p == pytest.approx(2 * sps.t.sf(abs(t), df), abs=1e-10)
        assert p == pytest.approx(quadrature_two_sided_p(t, df), abs=1e-9)


def test_shape_checks():
    with pytest.raises(LengthMismatch):
        paired_t_test([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        paired_t_test([1], [2])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.floats(-1e3, 1e3))
def test_shifted_copy_is_degenerate(a, c):
    a = np.array(a)
    with pytest.raises(DegenerateDifferences):
        paired_t_test(a, a)
    with pytest.raises(DegenerateDifferences):
        paired_t_test(a, a + c)


@given(st.integers(1, 80), st.floats(0, 50), st.floats(0, 50))
def test_p_monotone_in_abs_t(df, t1, t2):
    lo, hi = sorted((t1, t2))
    if hi - lo < 1e-6:
        return
    p_lo, p_hi = t_two_sided_p(lo, df), t_two_sided_p(hi, df)
    assert 0.0 <= p_hi <= p_lo <= 1.0
    if p_lo > 1e-300:
        assert p_hi < p_lo
