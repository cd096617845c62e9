import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.env import (EnvDistribution, EnvironmentError_, EnvironmentField, InvalidPerturbation,
                          LocalEnv, PerturbCell, PerturbedView, SitePair, balanced_atom, local_drift,
                          perturb, random_balanced_atoms, simple_walk)
from rwre_lab.rng import generator


def random_pair(seed, d=2):
    rng = generator(seed, "data", "pair")
    kappa = float(rng.uniform(0.02, 0.2))
    om = kappa + rng.dirichlet(np.ones(2 * d)) * (1 - 2 * d * kappa)
    xi = rng.uniform(-1, 1, 2 * d)
    xi -= xi.mean()
    xi /= max(1.0, np.abs(xi).max())
    return SitePair(LocalEnv(om, kappa), PerturbCell(xi))


def test_local_env_rejects_bad_rows():
    with pytest.raises(EnvironmentError_):
        LocalEnv([0.5, 0.5, 0.1, -0.1], 0.1)
    with pytest.raises(EnvironmentError_):
        LocalEnv([0.3, 0.3, 0.2, 0.3], 0.1)
    with pytest.raises(EnvironmentError_):
        PerturbCell([0.5, 0.5, -0.5, -0.6])


def test_site_homogeneous_simple_walk(field_of):
    dist = EnvDistribution.homogeneous(simple_walk(2))
    fld = field_of(dist, 5)
    for x in [(0, 0), (3, -7), (100, 2)]:
        s = fld.site(x)
        assert np.array_equal(s.omega.probs, np.full(4, 0.25))
        assert np.all(s.xi.xi == 0)


def test_site_is_deterministic_in_seed_and_point(two_atom_balanced):
    a = EnvironmentField(two_atom_balanced, 11)
    b = EnvironmentField(two_atom_balanced, 11, cache=True)
    pts = [(i, -i) for i in range(-20, 20)]
    for x in pts[::-1]:
        b.site(x)
    assert all(a.site(x) == b.site(x) for x in pts)


def test_two_atom_frequency():
    om = np.array([[0.3, 0.3, 0.2, 0.2], [0.2, 0.2, 0.3, 0.3]])
    dist = EnvDistribution.finite_support(om, np.zeros_like(om), [0.5, 0.5])
    fld = EnvironmentField(dist, 2)
    pts = np.stack(np.meshgrid(np.arange(-158, 158), np.arange(-158, 158)), -1).reshape(-1, 2)[:100_000]
    freq = (fld.atom_index(pts) == 0).mean()
    assert abs(freq - 0.5) < 3 * np.sqrt(0.25 / pts.shape[0])


def test_lateral_period(two_atom_balanced):
    fld = EnvironmentField(two_atom_balanced, 1, lateral_period=7)
    pts = np.array([[3, k] for k in range(-30, 30)])
    a = fld.atom_index(pts)
    b = fld.atom_index(pts + [0, 7])
    assert np.array_equal(a, b)


def test_perturb_examples(prop_walk):
    z = prop_walk.atom(0)
    assert np.array_equal(perturb(z, 0.0).probs, z.omega.probs)
    p = perturb(z, 0.1).probs
    assert np.allclose(p, [0.275, 0.225, 0.25, 0.25], atol=1e-15)
    assert abs(p.sum() - 1) < 1e-15
    with pytest.raises(InvalidPerturbation):
        perturb(z, z.omega.kappa / 2)
    with pytest.raises(InvalidPerturbation):
        perturb(z, -0.01)


def test_local_drift_examples():
    assert np.array_equal(local_drift(simple_walk(2)), [0.0, 0.0])
    assert np.allclose(local_drift([0.25, -0.25, 0, 0]), [0.5, 0.0])


@given(st.integers(0, 10_000), st.floats(0, 0.999))
def test_perturbation_stays_elliptic(seed, t):
    z = random_pair(seed)
    lam = t * z.omega.kappa / 2
    p = perturb(z, lam)
    assert p.probs.min() > z.omega.kappa / 2 - 1e-15
    assert abs(p.probs.sum() - 1) <= 1e-12
    # drift is affine in lambda
    assert np.allclose(local_drift(p.probs), local_drift(z.omega.probs) + lam * local_drift(z.xi.xi),
                       atol=1e-14)


@given(st.integers(0, 10_000), st.floats(0, 0.999), st.floats(0, 0.999))
def test_perturb_is_affine(seed, s, t):
    z = random_pair(seed)
    l1, l2 = s * z.omega.kappa / 2, t * z.omega.kappa / 2
    mid = perturb(z, (l1 + l2) / 2).probs
    assert np.allclose(mid, 0.5 * (perturb(z, l1).probs + perturb(z, l2).probs), atol=1e-12, rtol=0)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(2, 3), st.integers(1, 5))
def test_random_balanced_atoms(seed, d, n):
    kappa = 0.5 / (2 * d)
    om = random_balanced_atoms(generator(seed), d, n, kappa)
    assert np.allclose(om.sum(axis=1), 1)
    assert om.min() >= kappa - 1e-15
    assert np.abs(local_drift(om)).max() < 1e-15


def test_distribution_kinds_roundtrip():
    om = np.array([[0.3, 0.3, 0.2, 0.2], [0.2, 0.2, 0.3, 0.3]])
    dists = [
        EnvDistribution.homogeneous(simple_walk(2), [0.25, -0.25, 0, 0]),
        EnvDistribution.finite_support(om, [[0.1, -0.1, 0, 0], [0, 0, 0.2, -0.2]], [0.4, 0.6]),
        EnvDistribution.proportional(om, [0.5, 0.5], [1.0, 0.0]),
        EnvDistribution.independent(om, [0.5, 0.5], [[0.2, -0.2, 0, 0], [0, 0, 0, 0]], [0.3, 0.7]),
    ]
    for d in dists:
        back = EnvDistribution.from_dict(d.to_dict())
        assert np.array_equal(back.omega, d.omega)
        assert np.array_equal(back.xi, d.xi)
        assert np.allclose(back.weights, d.weights)
        assert abs(d.weights.sum() - 1) < 1e-12
    assert dists[2].balanced
    # proportional xi(e) = omega(e) (e . ell)
    assert np.allclose(dists[2].xi[0], [0.3, -0.3, 0, 0])


def test_distribution_validation():
    with pytest.raises(EnvironmentError_):
        EnvDistribution.finite_support([[0.3, 0.3, 0.2, 0.2]], [[0, 0, 0, 0]], [0.5])
    with pytest.raises(EnvironmentError_):
        # drift along ell is not allowed for the proportional kind
        EnvDistribution.proportional([[0.4, 0.2, 0.2, 0.2]], [1.0], [1.0, 0.0])


def test_perturbed_view_rejects_large_lambda(prop_walk):
    fld = EnvironmentField(prop_walk, 0)
    with pytest.raises(InvalidPerturbation):
        PerturbedView(fld, 0.125)
    v = PerturbedView(fld, 0.1)
    assert np.allclose(v.local((4, 4)).probs, [0.275, 0.225, 0.25, 0.25])


def test_balanced_atom():
    assert np.allclose(balanced_atom([1, 3]), [0.125, 0.125, 0.375, 0.375])
