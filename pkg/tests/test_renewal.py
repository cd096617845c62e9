import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.env import EnvDistribution
from rwre_lab.renewal import (NotBallistic, detect_renewals, lambda_operator, renewal_blocks,
                              renewal_gap_oracle)
from rwre_lab.stats import lag_correlation
from rwre_lab.walk import WalkPath


def path_of(moves):
    """Path in d = 2 from e1-increments (+1 / -1) and lateral steps (0)."""
    code = {1: 0, -1: 1, 0: 2}
    return WalkPath(np.zeros(2, np.int64), np.array([code[m] for m in moves], np.int8))


def brute_renewals(p):
    T = p.size - 1
    return [t for t in range(1, T) if p[t] > p[:t].max() and p[t] < p[t + 1:].min()]


@pytest.fixture(scope="module")
def drifted():
    om = [[0.4, 0.1, 0.25, 0.25], [0.3, 0.2, 0.25, 0.25]]
    xi = [[0.05, -0.05, 0.0, 0.0], [-0.02, 0.02, 0.05, -0.05]]
    return EnvDistribution.finite_support(om, xi, [0.5, 0.5])


@pytest.fixture(scope="module")
def blocks(drifted):
    return renewal_blocks(drifted, 40, 20_000, 1)


def test_straight_path_renews_every_step():
    rt = detect_renewals(path_of([1] * 10), [1, 0])
    assert rt.times.tolist() == list(range(1, 10))


def test_backtracking_example():
    # e1 levels 0 1 2 1 2 3 4 5: level 1 is revisited at t = 3, and t = 7 has no future
    rt = detect_renewals(path_of([1, 1, -1, 1, 1, 1, 1]), [1, 0])
    assert rt.times.tolist() == [5, 6]


def test_lateral_steps_break_strict_record():
    rt = detect_renewals(path_of([1, 0, 1, 1]), [1, 0])
    # at t = 2 the walker sits at the same level as t = 1, which is then not strictly exceeded later
    assert rt.times.tolist() == [3]


def test_margin_drops_unconfirmed():
    rt = detect_renewals(path_of([1] * 10), [1, 0], margin=3)
    assert rt.times.tolist() == list(range(1, 8))
    assert rt.unconfirmed == 2


@settings(max_examples=100)
@given(st.lists(st.sampled_from([1, 1, -1, 0]), min_size=3, max_size=200))
def test_renewals_match_brute_force(moves):
    path = path_of(moves)
    rt = detect_renewals(path, [1, 0])
    assert rt.times.tolist() == brute_renewals(path.e1)


def test_gap_oracle_examples():
    assert renewal_gap_oracle([0.4, 0.1, 0.25, 0.25]) == pytest.approx(1 / 0.3)
    with pytest.raises(NotBallistic):
        renewal_gap_oracle([0.25, 0.25, 0.25, 0.25])


def test_gap_oracle_against_simulation():
    omega = [0.35, 0.15, 0.25, 0.25]
    b = renewal_blocks(EnvDistribution.homogeneous(omega), 30, 20_000, 2)
    dx = np.concatenate(b.dX)
    se = dx.std(ddof=1) / np.sqrt(dx.size)
    assert abs(dx.mean() - renewal_gap_oracle(omega)) < 3 * se


def test_blocks_are_consistent(blocks):
    for C, dT in zip(blocks.C, blocks.dT):
        assert np.array_equal(C.sum(axis=1), dT)
    assert blocks.occupation().sum() == pytest.approx(1.0)
    assert np.all(np.concatenate(blocks.dX) >= 1)


def test_constant_f_gives_exact_zero(blocks):
    lam = lambda_operator(blocks, [1.0, 1.0], n_boot=50)
    assert lam.value == 0.0
    assert lambda_operator(blocks, [-3.5, -3.5], n_boot=50).value == 0.0


def test_zero_xi_gives_zero(drifted):
    dist = EnvDistribution.finite_support(drifted.omega, np.zeros_like(drifted.xi), [0.5, 0.5])
    b = renewal_blocks(dist, 30, 10_000, 3)
    assert lambda_operator(b, [1.0, -2.0], n_boot=50).value == 0.0


def test_lambda_is_linear(blocks):
    f, g = np.array([1.0, -0.5]), np.array([0.2, 2.0])
    lf = lambda_operator(blocks, f, n_boot=50).value
    lg = lambda_operator(blocks, g, n_boot=50).value
    assert lambda_operator(blocks, f + g, n_boot=50).value == pytest.approx(lf + lg, rel=1e-10, abs=1e-14)
    assert lambda_operator(blocks, 2 * f, n_boot=50).value == pytest.approx(2 * lf, rel=1e-10)
    assert lambda_operator(blocks, f + 7.0, n_boot=50).value == pytest.approx(lf, rel=1e-10, abs=1e-14)


def test_lambda_bootstrap_is_reproducible(blocks):
    a = lambda_operator(blocks, [1.0, 0.0], n_boot=200, seed=4)
    b = lambda_operator(blocks, [1.0, 0.0], n_boot=200, seed=4)
    assert a.stderr == b.stderr > 0


def test_balanced_base_is_refused(two_atom_balanced):
    b = renewal_blocks(two_atom_balanced, 30, 5000, 5)
    with pytest.raises(NotBallistic):
        lambda_operator(b, [1.0, 0.0])


def test_renewal_blocks_are_uncorrelated(blocks):
    dT = np.concatenate(blocks.dT)
    dX = np.concatenate(blocks.dX)
    assert lag_correlation(dT, 1).contains(0.0)
    assert lag_correlation(dX, 1).contains(0.0)
