import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.rng import generator
from rwre_lab.stats import (Estimate, InsufficientData, batch_mean_ci, block_bootstrap_ci, lag_correlation,
                            mean_ci, merge_sparse_bins, multinomial_fit, ratio_ci, slope_ci,
                            two_sample_multinomial)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(30, 200))
def test_constant_samples_give_zero_width(c, n):
    x = np.full(n, c)
    for est in (mean_ci(x), batch_mean_ci(x)):
        assert est.value == pytest.approx(c, rel=1e-12, abs=1e-9)
        assert est.stderr == pytest.approx(0.0, abs=1e-9 * max(1.0, abs(c)))


def test_refuses_small_samples():
    with pytest.raises(InsufficientData):
        mean_ci(np.ones(29))
    with pytest.raises(InsufficientData):
        ratio_ci(np.ones(10), np.ones(10))


def test_mean_ci_coverage():
    rng = generator(0, "data", "coverage")
    hits = sum(mean_ci(rng.standard_normal(200)).contains(0.0) for _ in range(1000))
    assert 990 <= hits <= 1000


def one_dependent(rng, n):
    e = rng.standard_normal(n + 1)
    return e[1:] + 0.9 * e[:-1]


def test_block_bootstrap_beats_naive_on_one_dependent_data():
    rng = generator(1, "data", "mdep")
    naive = boot = 0
    for _ in range(200):
        x = one_dependent(rng, 300)
        naive += mean_ci(x).contains(0.0)
        boot += block_bootstrap_ci(x, np.mean, 10, 200, rng).contains(0.0)
    assert boot >= naive
    assert boot >= 190


def test_ratio_ci_recovers_ratio():
    rng = generator(2, "data", "ratio")
    den = rng.uniform(1, 3, 5000)
    num = 0.4 * den + 0.1 * rng.standard_normal(5000)
    est = ratio_ci(num, den)
    assert est.contains(0.4)
    assert est.stderr < 0.01


def test_lag_correlation_of_iid_and_one_dependent():
    rng = generator(3, "data", "lag")
    x = rng.standard_normal(5000)
    assert lag_correlation(x, 1).contains(0.0)
    y = one_dependent(rng, 5000)
    r1 = lag_correlation(y, 1)
    assert r1.value > 0.3  # 0.9 / 1.81
    assert lag_correlation(y, 2).contains(0.0)


def test_merge_sparse_bins_preserves_totals():
    c1 = np.array([0, 1, 50, 2, 0, 40, 1])
    c2 = np.array([1, 0, 45, 3, 1, 38, 0])
    m1, m2 = merge_sparse_bins(c1, c2)
    assert m1.sum() == c1.sum() and m2.sum() == c2.sum()
    frac = c1.sum() / (c1.sum() + c2.sum())
    assert np.all((m1 + m2) * min(frac, 1 - frac) >= 5)


def test_two_sample_multinomial():
    rng = generator(4, "data", "chi")
    p = np.array([0.1, 0.2, 0.3, 0.4])
    a = rng.multinomial(10_000, p)
    b = rng.multinomial(10_000, p)
    assert two_sample_multinomial(a, b).passed
    c = rng.multinomial(10_000, [0.13, 0.2, 0.27, 0.4])
    assert not two_sample_multinomial(a, c).passed


def test_two_sample_calibration():
    rng = generator(5, "data", "chi2")
    p = rng.dirichlet(np.ones(12))
    rejections = sum(not two_sample_multinomial(rng.multinomial(2000, p), rng.multinomial(2000, p)).passed
                     for _ in range(400))
    assert rejections <= 6


def test_multinomial_fit():
    rng = generator(6, "data", "fit")
    p = np.array([0.05, 0.25, 0.25, 0.45])
    assert multinomial_fit(rng.multinomial(20_000, p), p).passed
    assert not multinomial_fit(rng.multinomial(20_000, p), [0.1, 0.2, 0.25, 0.45]).passed


def test_slope_ci():
    x = np.linspace(0, 1, 50)
    est = slope_ci(x, 2 * x + 1)
    assert est.value == pytest.approx(2.0)
    assert est.stderr < 1e-6


def test_estimate_interval():
    e = Estimate(1.0, 0.1, 40)
    assert e.lo == pytest.approx(0.7) and e.hi == pytest.approx(1.3)
    assert e.contains(1.29) and not e.contains(1.31)
    row = e.as_row()
    assert row["n"] == 40 and row["censoring"] == 0.0
