import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.env import EnvDistribution, local_drift, simple_walk
from rwre_lab.kalikow import (BudgetExceeded, build_chain, certify_condition_K, default_family, drift_ratio,
                              estimate_rho, exit_identity_check)
from rwre_lab.slab import AbsorbingSystem, box

BOX = box([-1, -1], [1, 1])
O = np.zeros(2, np.int64)


@pytest.fixture
def two_atom():
    om = np.array([[0.28, 0.28, 0.22, 0.22], [0.22, 0.22, 0.28, 0.28]])
    return EnvDistribution.proportional(om, [0.5, 0.5], [1.0, 0.0])


def skewed_pair():
    om = [[0.1, 0.4, 0.25, 0.25], [0.4, 0.1, 0.25, 0.25]]
    xi = [[0.25, -0.25, 0, 0], [-0.2, 0.2, 0, 0]]
    return EnvDistribution.finite_support(om, xi, [0.5, 0.5])


def test_homogeneous_chain_is_the_perturbed_walk(prop_walk):
    ch = build_chain(prop_walk, BOX, O, 0.1)
    assert np.allclose(ch.rows, [0.275, 0.225, 0.25, 0.25], atol=1e-14)
    assert exit_identity_check(prop_walk, BOX, O, 0.1, ch) < 1e-12


def test_balanced_chain_has_no_e1_drift_at_lambda_zero(two_atom):
    ch = build_chain(two_atom, BOX, O, 0.0)
    assert np.abs(ch.drift[:, 0]).max() < 1e-10
    assert abs(ch.drift[BOX.index_of(O), 0]) < 1e-10


def test_perturbed_chain_drifts_forward(two_atom):
    ch = build_chain(two_atom, BOX, O, 0.1)
    assert np.all(ch.drift[:, 0] > 0)
    rows = ch.rows
    assert np.abs(rows.sum(axis=1) - 1).max() < 1e-9
    assert rows.min() >= two_atom.kappa / 2 * two_atom.weights.min() / two_atom.weights.max()


@pytest.mark.parametrize("lam", [0.0, 0.1])
def test_exit_identity(two_atom, lam):
    assert exit_identity_check(two_atom, BOX, O, lam) < 1e-10


def test_exit_identity_detects_corruption(two_atom):
    ch = build_chain(two_atom, BOX, O, 0.1)
    rows = ch.rows.copy()
    rows[ch.start] += [1e-3, -1e-3, 0, 0]
    bad = AbsorbingSystem(BOX, rows).exit_row(ch.start)
    assert 0.5 * np.abs(bad - ch.annealed_exit).sum() > 1e-4


def test_annealed_exit_by_direct_enumeration(two_atom):
    """Independent route: average quenched exit laws over all 2^9 assignments."""
    lam = 0.1
    ch = build_chain(two_atom, BOX, O, lam)
    table = two_atom.perturbed(lam)
    acc = np.zeros(BOX.boundary.shape[0])
    for assign in itertools.product(range(2), repeat=BOX.n):
        w = np.prod(two_atom.weights[list(assign)])
        acc += w * AbsorbingSystem(BOX, table[list(assign)], "dense").exit_row(ch.start)
    assert np.allclose(acc, ch.annealed_exit, atol=1e-13)


def test_monte_carlo_mode_brackets_exact(two_atom):
    ex = build_chain(two_atom, BOX, O, 0.1)
    mc = build_chain(two_atom, BOX, O, 0.1, mode="mc", samples=4000, seed=1)
    z = np.abs(mc.rows - ex.rows) / np.maximum(mc.stderr, 1e-15)
    assert z.max() < 4.5  # 36 entries, Bonferroni at the 3-sigma level
    with pytest.raises(ValueError):
        build_chain(two_atom, BOX, O, 0.1, mode="mc", samples=5)


def test_budget(two_atom):
    with pytest.raises(BudgetExceeded):
        build_chain(two_atom, box([-3, -3], [3, 3]), O, 0.0)


def test_certify_independent_positive_mean():
    om = [[0.3, 0.2, 0.25, 0.25], [0.2, 0.3, 0.2, 0.3]]
    xi = [[0.3, -0.1, -0.1, -0.1], [-0.1, 0.1, 0.0, 0.0]]
    dist = EnvDistribution.independent(om, [0.5, 0.5], xi, [0.6, 0.4])
    assert dist.mean_drift("xi")[0] > 0
    rep = certify_condition_K(dist, [1.0, 0.0])
    assert rep.verdict == "certified"
    assert rep.minimum > 0
    assert rep.trace


def test_zero_xi_is_refuted():
    dist = EnvDistribution.homogeneous(simple_walk(2))
    rep = certify_condition_K(dist, [1.0, 0.0])
    assert rep.verdict == "refuted"
    assert rep.witness is not None


def test_skewed_pair_is_refuted_with_witness():
    dist = skewed_pair()
    numer = local_drift(dist.xi) @ np.array([1.0, 0.0])
    assert dist.weights @ numer > 0  # positive mean, yet (K) fails
    grid = np.array(list(itertools.product(np.linspace(0, 1, 5), repeat=4)))[1:]
    vals = np.array([drift_ratio(f, numer, dist.omega, dist.weights)[0] for f in grid])
    assert vals.min() < 0
    rep = certify_condition_K(dist, [1.0, 0.0])
    assert rep.verdict == "refuted"
    assert drift_ratio(rep.witness, numer, dist.omega, dist.weights)[0] <= 1e-12
    assert rep.minimum <= vals.min() + 1e-12


@settings(max_examples=40)
@given(st.lists(st.floats(0.01, 1), min_size=4, max_size=4), st.floats(1e-3, 1e3))
def test_drift_ratio_is_scale_invariant(f, c):
    dist = skewed_pair()
    numer = local_drift(dist.xi)[:, 0]
    f = np.asarray(f)
    a, ga = drift_ratio(f, numer, dist.omega, dist.weights)
    b, gb = drift_ratio(c * f, numer, dist.omega, dist.weights)
    assert b == pytest.approx(a, rel=1e-10, abs=1e-14)
    assert np.allclose(gb * c, ga, rtol=1e-8, atol=1e-12)


def test_drift_ratio_gradient():
    dist = skewed_pair()
    numer = local_drift(dist.xi)[:, 0]
    f = np.array([0.3, 0.7, 0.2, 0.9])
    _, g = drift_ratio(f, numer, dist.omega, dist.weights)
    h = 1e-6
    fd = [(drift_ratio(f + h * e, numer, dist.omega, dist.weights)[0]
           - drift_ratio(f - h * e, numer, dist.omega, dist.weights)[0]) / (2 * h) for e in np.eye(4)]
    assert np.allclose(g, fd, atol=1e-7)


def test_rho_homogeneous_e56(prop_walk):
    fam = default_family(2)[:2]
    for lam in (0.1, 0.05):
        assert estimate_rho(prop_walk, [1, 0], lam, fam).rho == pytest.approx(0.5, abs=1e-12)


def test_rho_stable_when_lambda_halved(two_atom):
    fam = default_family(2)[:3]
    r1 = estimate_rho(two_atom, [1, 0], 0.1, fam).rho
    r2 = estimate_rho(two_atom, [1, 0], 0.05, fam).rho
    assert r1 > 0 and abs(r1 - r2) / r2 < 0.1


def test_rho_of_refuted_distribution():
    dist = skewed_pair()
    rep = estimate_rho(dist, [1, 0], 0.04, default_family(2)[:3])
    assert rep.rho <= 0
    assert rep.verdict == "refuted"


def test_drift_condition_of_perturbed_law(two_atom):
    # d(omega^lam).e1 = lam d(xi).e1 > 0 for every atom of the proportional family
    assert certify_condition_K(two_atom, [1.0, 0.0], 0.05, condition="drift").verdict == "certified"
    assert certify_condition_K(two_atom, [1.0, 0.0], 0.0, condition="drift").verdict == "refuted"
    with pytest.raises(ValueError):
        certify_condition_K(two_atom, [1.0, 0.0], condition="other")
