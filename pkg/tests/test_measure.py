import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.env import EnvDistribution, EnvironmentField, PerturbedView, simple_walk
from rwre_lab.experiments import random_instance
from rwre_lab.measure import (log_weight, remainder_bound, remainder_terms, reweighted_block_estimator,
                              taylor_split, unit_mean_oracle)
from rwre_lab.walk import WalkPath, a_table, h_table, occupation, simulate, walker_key


def test_log_weight_examples(prop_walk):
    fld = EnvironmentField(prop_walk, 0)
    step = WalkPath(np.zeros(2, np.int64), np.array([0], np.int8))
    assert log_weight(step, fld, 0.1).log_weight == pytest.approx(math.log1p(0.1), abs=1e-15)
    p = simulate(PerturbedView(fld, 0.0), [0, 0], 500, walker_key(0))
    assert log_weight(p, fld, 0.0).log_weight == 0.0
    flat = EnvironmentField(EnvDistribution.homogeneous(simple_walk(2)), 0)
    assert log_weight(p, flat, 0.1).log_weight == 0.0
    sp = taylor_split(p, flat, 0.1)
    assert sp.linear == sp.quadratic == sp.remainder == 0.0


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0, 0.99))
def test_taylor_reconstruction_and_H_bracket(i, t):
    dist, _, fld = random_instance(17, i)
    lam = t * dist.kappa / 2
    p = simulate(PerturbedView(fld, 0.0), [0, 0], 100, walker_key(i, "taylor"))
    g = log_weight(p, fld, lam)
    sp = taylor_split(p, fld, lam)
    assert abs(sp.total - g.log_weight) < 1e-10
    assert math.isfinite(g.log_weight)
    # |lambda a| <= lambda / kappa < 1/2, so each remainder term is within the termwise bound
    a = a_table(dist)[p.atoms, p.steps]
    assert abs(sp.remainder) <= remainder_bound(a, lam) + 1e-15


def test_remainder_over_lambda_cubed_is_bounded(two_atom_balanced):
    fld = EnvironmentField(two_atom_balanced, 1)
    p = simulate(PerturbedView(fld, 0.0), [0, 0], 200, walker_key(1, "h"))
    bound = (1 + 1 / two_atom_balanced.kappa) / 3
    for lam in (0.05, 0.01, 1e-3, 1e-4):
        H = taylor_split(p, fld, lam).H
        assert abs(H) <= bound


@given(st.floats(-0.49, 0.49))
def test_remainder_terms_small_argument_branch(x):
    v = remainder_terms(np.array([x]))[0]
    exact = math.log1p(x) - x + x * x / 2
    assert abs(v - exact) <= 1e-15 + 1e-9 * abs(exact)


def test_unit_mean_homogeneous_e56(prop_walk):
    assert abs(unit_mean_oracle(EnvironmentField(prop_walk, 0), 0.1, 6) - 1) < 1e-12
    assert unit_mean_oracle(EnvironmentField(prop_walk, 0), 0.0, 4) == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_unit_mean_random_fields(i, n):
    _, lam, fld = random_instance(3, i)
    assert abs(unit_mean_oracle(fld, lam, n) - 1) < 1e-12


def test_unit_mean_budget(prop_walk):
    with pytest.raises(ValueError):
        unit_mean_oracle(EnvironmentField(prop_walk, 0), 0.1, 12)


def test_a_increments_are_centered_under_base_law(two_atom_balanced):
    dist = two_atom_balanced
    view = PerturbedView(EnvironmentField(dist, 5), 0.0)
    J = np.array([occupation(view, [0, 0], 1000, walker_key(5, "J", r)).step_sum(a_table(dist))[0]
                  for r in range(500)])
    assert abs(J.mean()) < 3 * J.std(ddof=1) / np.sqrt(J.size)


def test_quadratic_variation_matches_h(two_atom_balanced):
    dist = two_atom_balanced
    lam = 0.05
    view = PerturbedView(EnvironmentField(dist, 6), 0.0)
    n = math.ceil(1 / lam ** 2)
    a2, hs = [], []
    for r in range(300):
        occ = occupation(view, [0, 0], n, walker_key(6, "qv", r))
        a2.append(lam ** 2 * occ.step_sum(a_table(dist) ** 2)[0])
        hs.append(lam ** 2 * occ.site_sum(h_table(dist))[0])
    a2, hs = np.array(a2), np.array(hs)
    diff = a2 - hs
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)


def test_reweighted_estimator_constant_field():
    dist = EnvDistribution.homogeneous(simple_walk(2), [0.25, -0.25, 0, 0])
    res = reweighted_block_estimator(dist.omega[:, 0], EnvironmentField(dist, 0), 0.1, 1.0, 200, 0)
    # i runs over 0..ceil(t / lambda^2), hence the factor 101 / 100
    assert res.direct.value == pytest.approx(0.25 * 1.01, abs=1e-12)
    assert res.direct.stderr == pytest.approx(0.0, abs=1e-12)
    ones = reweighted_block_estimator(np.ones(1), EnvironmentField(dist, 0), 0.1, 1.0, 200, 0)
    assert ones.direct.value == pytest.approx(1.01, abs=1e-12)
    assert ones.reweighted.contains(1.01)
    assert res.agree()


def test_reweighted_agrees_with_direct(two_atom_balanced):
    fld = EnvironmentField(two_atom_balanced, 9)
    res = reweighted_block_estimator(two_atom_balanced.omega[:, 0], fld, 0.05, 1.0, 400, 9)
    assert res.ess > 30
    assert res.agree()
