"""Change of measure between the quenched laws under ``omega`` and ``omega^lambda``.

Along a path the log Radon-Nikodym derivative is ``G = sum_j log(1 + lambda a_j)``
with ``a_j = xi(X_j, dX_j) / omega(X_j, dX_j)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import EnvironmentField, PerturbedView, check_lambda, unit_vectors
from .stats import Estimate, InsufficientData, mean_ci
from .walk import WalkPath, a_table, occupation, walker_key


@dataclass(frozen=True)
class GirsanovWeight:
    log_weight: float
    s: int
    lam: float

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


@dataclass(frozen=True)
class TaylorSplit:
    """``G = linear + quadratic + remainder`` with ``remainder = lambda^3 ceil(s) H``."""

    linear: float
    quadratic: float
    remainder: float
    s: int
    lam: float

    @property
    def H(self) -> float:
        if self.lam == 0 or self.s == 0:
            return 0.0
        return self.remainder / (self.lam ** 3 * math.ceil(self.s))

    @property
    def total(self) -> float:
        return self.linear + self.quadratic + self.remainder


def _path_a(path: WalkPath, fld: EnvironmentField) -> np.ndarray:
    atoms = path.site_atoms(fld)
    return a_table(fld.dist)[atoms, path.steps.astype(np.int64)]


def log_weight(path: WalkPath, fld: EnvironmentField, lam: float) -> GirsanovWeight:
    check_lambda(lam, fld.dist.kappa)
    a = _path_a(path, fld)
    return GirsanovWeight(float(np.log1p(lam * a).sum()), len(path), lam)


def remainder_terms(x: np.ndarray) -> np.ndarray:
    """``log(1+x) - x + x^2/2``, accurate for small ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(x) - x + 0.5 * x * x
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = xs ** 3 / 3 - xs ** 4 / 4 + xs ** 5 / 5
    return out


def taylor_split(path: WalkPath, fld: EnvironmentField, lam: float) -> TaylorSplit:
    check_lambda(lam, fld.dist.kappa)
    a = _path_a(path, fld)
    return TaylorSplit(float(lam * a.sum()), float(-0.5 * lam ** 2 * (a ** 2).sum()),
                       float(remainder_terms(lam * a).sum()), len(path), lam)


def remainder_bound(a: np.ndarray, lam: float) -> float:
    """Termwise bound ``sum |lambda a|^3 / (3 (1 - |lambda a|))`` on ``|remainder|``."""
    x = np.abs(lam * np.asarray(a, dtype=np.float64))
    return float(np.sum(x ** 3 / (3 * (1 - x))))


def unit_mean_oracle(fld: EnvironmentField, lam: float, n: int, start=None,
                     budget: int = 2_000_000) -> float:
    """``sum over length-n paths of P_omega(path) exp(G(path))`` by exhaustive enumeration."""
    check_lambda(lam, fld.dist.kappa)
    d = fld.d
    k = 2 * d
    if k ** n > budget:
        raise ValueError(f"enumeration of {k}^{n} paths exceeds budget {budget}")
    dirs = unit_vectors(d)
    a_tab = a_table(fld.dist)
    om = fld.dist.omega
    pos = np.zeros((1, d), dtype=np.int64) if start is None else np.asarray(start, np.int64)[None]
    logp = np.zeros(1)
    g = np.zeros(1)
    for _ in range(n):
        atoms = fld.atom_index(pos)
        logp = (logp[:, None] + np.log(om[atoms])).ravel()
        g = (g[:, None] + np.log1p(lam * a_tab[atoms])).ravel()
        pos = (pos[:, None, :] + dirs[None, :, :]).reshape(-1, d)
    return float(np.sum(np.exp(logp + g)))


@dataclass(frozen=True)
class ReweightedResult:
    direct: Estimate
    reweighted: Estimate
    ess: float
    n_steps: int

    def agree(self) -> bool:
        diff = self.direct.value - self.reweighted.value
        se = math.hypot(self.direct.stderr, self.reweighted.stderr)
        return abs(diff) <= 3 * se + 1e-12


def reweighted_block_estimator(f_atoms, fld: EnvironmentField, lam: float, t: float,
                               replicas: int, seed: int, min_ess: float = 30.0) -> ReweightedResult:
    """Estimate ``(lambda^2/t) E_{omega^lambda}[sum_{i<=ceil(t/lambda^2)} f(zeta_i)]`` two ways.

    The direct estimator simulates under ``omega^lambda``; the second simulates
    under ``omega`` and weights each replica by ``exp(G)`` over the same number
    of steps. Both use the same field and independent walker streams.
    """
    check_lambda(lam, fld.dist.kappa)
    if lam == 0:
        raise ValueError("reweighting needs lambda > 0")
    f_atoms = np.asarray(f_atoms, dtype=np.float64)
    n = math.ceil(t / lam ** 2)
    start = np.zeros(fld.d, dtype=np.int64)
    scale = lam ** 2 / t
    pert = PerturbedView(fld, lam)
    base = PerturbedView(fld, 0.0)
    log1p_tab = np.log1p(lam * a_table(fld.dist))
    direct = np.empty(replicas)
    vals = np.empty(replicas)
    logw = np.empty(replicas)
    for r in range(replicas):
        # n steps visit X_0..X_{n-1}; one extra step exposes X_n
        occ = occupation(pert, start, n + 1, walker_key(seed, "direct", r), [n + 1])
        direct[r] = scale * occ.site_sum(f_atoms)[0]
        occ0 = occupation(base, start, n + 1, walker_key(seed, "base", r), [n, n + 1])
        vals[r] = scale * occ0.site_sum(f_atoms)[1]
        logw[r] = occ0.step_sum(log1p_tab)[0]
    w = np.exp(logw)
    ess = float(w.sum() ** 2 / (w ** 2).sum())
    if ess < min_ess:
        raise InsufficientData(f"reweighted estimator collapsed: effective sample size {ess:.1f}")
    return ReweightedResult(mean_ci(direct), mean_ci(w * vals), ess, n)
