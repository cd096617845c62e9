"""Renewal structure of ballistic walks, the Lambda operator and the speed-derivative pipeline.

A time ``t > 0`` is a renewal time in direction ``ell`` if ``X_t.ell`` is a
strict running maximum and every later position lies strictly above it.
Blocks between consecutive renewals are iid for ``k >= 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import EnvDistribution, EnvironmentField, PerturbedView, check_lambda, local_drift
from .rng import derive_key, generator
from .stats import Estimate, InsufficientData, mean_ci
from .parallel import pmap
from .walk import WalkPath, a_table, occupation, simulate, walker_key


class NotBallistic(ValueError):
    pass


@dataclass
class RenewalTimes:
    times: np.ndarray
    levels: np.ndarray
    unconfirmed: int
    horizon: int


def detect_renewals(path: WalkPath, ell, margin: float = 0.0) -> RenewalTimes:
    """Exact scan for renewal times on the recorded path.

    The right-tail condition can only be checked up to the horizon, so a
    candidate whose level is within ``margin`` of the final position is
    counted as unconfirmed and dropped.
    """
    p = path.positions @ np.asarray(ell, dtype=np.float64)
    T = p.size - 1
    if T < 2:
        return RenewalTimes(np.zeros(0, np.int64), np.zeros(0), 0, T)
    left = np.maximum.accumulate(p)[:-1]      # max over m < t, for t = 1..T
    right = np.minimum.accumulate(p[::-1])[::-1][1:]  # min over n > t, for t = 0..T-1
    t = np.arange(1, T)
    cand = (p[1:T] > left[:T - 1]) & (p[1:T] < right[1:T])
    times = t[cand]
    ok = p[-1] - p[times] >= margin
    return RenewalTimes(times[ok], p[times[ok]], int((~ok).sum()), T)


def renewal_gap_oracle(omega) -> float:
    """Mean e1-gap between renewal levels of a homogeneous walk: ``1 / (p+ - p-)``.

    A level is a renewal level when the walk leaves it by ``+e1`` on first
    arrival and never comes back, which has probability
    ``p+ * (1 - p-/p+)``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    pp, pm = omega[0], omega[1]
    if pp <= pm:
        raise NotBallistic("no drift along e1")
    from .coupling import never_visit

    return 1.0 / (pp * never_visit(pp / pm, 1))


# ---------------------------------------------------------------------------
# block sums
# ---------------------------------------------------------------------------


@dataclass
class RenewalBlocks:
    """Per-replica block data over ``[T(k), T(k+1))`` for ``k >= 1``.

    ``C`` are atom visit counts per block (shape ``(blocks, n_atoms)``), so any
    site function's block sum is ``C @ f``; ``V`` are block sums of
    ``a(zeta, dX)``, ``dT`` block lengths and ``dX`` the ``ell``-displacements.
    """

    C: list
    V: list
    dT: list
    dX: list
    speed: np.ndarray
    density: np.ndarray
    unconfirmed: int

    def occupation(self) -> np.ndarray:
        """Fraction of post-``T(1)`` time spent on each atom."""
        tot = sum(c.sum(axis=0) for c in self.C)
        return tot / tot.sum()

    def rows(self, f_atoms, n_f: int = 1) -> np.ndarray:
        """Rows ``(U_j, dT_j, V_j, U_{j+1}, dT_{j+1}, V_{j+1}, ...)`` for lags up to ``n_f``.

        ``U_j`` is the block sum of ``f - Qf`` with ``Qf`` the occupation average;
        centering at the atom level keeps ``U`` exactly 0 for constant ``f``.
        """
        f = np.asarray(f_atoms, dtype=np.float64)
        fc = f - self.occupation() @ f
        out = []
        for C, V, dT in zip(self.C, self.V, self.dT):
            m = dT.size - n_f
            if m <= 0:
                continue
            U = C @ fc
            cols = []
            for lag in range(n_f + 1):
                cols += [U[lag:lag + m], dT[lag:lag + m], V[lag:lag + m]]
            out.append(np.column_stack(cols))
        if not out:
            raise InsufficientData("no complete renewal blocks")
        return np.vstack(out)

    @property
    def n_blocks(self) -> int:
        return int(sum(x.size for x in self.dT))


def renewal_blocks(dist: EnvDistribution, replicas: int, horizon: int, seed: int,
                   ell=(1, 0), lam: float = 0.0, margin: float | None = None) -> RenewalBlocks:
    """Simulate ``replicas`` walks in independent fields and cut them at renewal times."""
    check_lambda(lam, dist.kappa)
    ell = np.asarray(ell, dtype=np.float64)
    a_tab = a_table(dist)
    start = np.zeros(dist.d, dtype=np.int64)
    eye = np.eye(dist.n_atoms, dtype=np.int64)

    def one(r):
        fld = EnvironmentField(dist, int(derive_key(seed, "env", "renewal", r)))
        path = simulate(PerturbedView(fld, lam), start, horizon, walker_key(seed, "renewal", r))
        rt = detect_renewals(path, ell, 50.0 if margin is None else margin)
        proj = path.positions @ ell
        t = rt.times
        blocks = None
        if t.size >= 2:
            end = t[-1]
            atoms = path.atoms[:end].astype(np.int64)
            steps = path.steps[:end].astype(np.int64)
            C = np.add.reduceat(eye[atoms], t[:-1], axis=0)
            V = np.add.reduceat(a_tab[atoms, steps], t[:-1])
            blocks = (C, V, np.diff(t).astype(np.float64), np.diff(proj[t]))
        return rt.unconfirmed, proj[-1] / horizon, t.size / max(proj[-1], 1.0), blocks

    out = pmap(one, range(replicas))
    Cs, Vs, dTs, dXs = ([o[3][k] for o in out if o[3] is not None] for k in range(4))
    return RenewalBlocks(Cs, Vs, dTs, dXs, np.array([o[1] for o in out]), np.array([o[2] for o in out]),
                         sum(o[0] for o in out))


def ballistic_check(blocks: RenewalBlocks, min_density: float = 1e-3) -> Estimate:
    """Empirical ballisticity: speed CI excludes 0 and renewals are not too sparse."""
    v = mean_ci(blocks.speed)
    if v.lo <= 0:
        raise NotBallistic(f"speed {v.value:.3g} +- {v.stderr:.2g} does not exclude 0")
    if blocks.density.mean() < min_density:
        raise NotBallistic(f"renewal density {blocks.density.mean():.3g} below {min_density}")
    return v


@dataclass
class LambdaEstimate:
    value: float
    stderr: float
    n: int
    EUV: float
    cross: float
    mean_dT: float
    Q: float

    @property
    def estimate(self) -> Estimate:
        return Estimate(self.value, self.stderr, self.n)

    def contains(self, x: float, z: float = 3.0) -> bool:
        return abs(self.value - x) <= z * self.stderr + 1e-15


def _lambda_terms(rows: np.ndarray, n_f: int) -> np.ndarray:
    """Per-row terms whose column sums determine the estimator.

    Columns: ``U_j, dT_j, U_j V_j, dT_j V_j`` and the lag sums
    ``sum_i U_j V_{j+i} + U_{j+i} V_j`` and ``sum_i dT_j V_{j+i} + dT_{j+i} V_j``.
    Re-centering ``U`` by ``delta`` (a resample's own ``Qf``) subtracts
    ``delta`` times the matching ``dT`` column.
    """
    U0, dT0, V0 = rows[:, 0], rows[:, 1], rows[:, 2]
    cu = np.zeros(rows.shape[0])
    ct = np.zeros(rows.shape[0])
    for lag in range(1, n_f + 1):
        U, dT, V = rows[:, 3 * lag], rows[:, 3 * lag + 1], rows[:, 3 * lag + 2]
        cu += U0 * V + U * V0
        ct += dT0 * V + dT * V0
    return np.column_stack([U0, dT0, U0 * V0, dT0 * V0, cu, ct])


def _lambda_from_sums(S: np.ndarray, n: int):
    delta = S[0] / S[1]
    euv = (S[2] - delta * S[3]) / n
    cross = (S[4] - delta * S[5]) / n
    mdt = S[1] / n
    return float((euv + cross) / mdt), float(euv), float(cross), float(mdt)


def lambda_operator(blocks: RenewalBlocks, f_atoms, n_f: int = 1, n_boot: int = 1000, seed: int = 0,
                    require_ballistic: bool = True, chunk: int = 200) -> LambdaEstimate:
    """``(E[U_1 V_1] + sum_{i <= N_f} E[U_1 V_{1+i} + U_{1+i} V_1]) / E[T(2) - T(1)]``.

    ``U_j`` are block sums of ``f - Qf`` with ``Qf`` the post-``T(1)`` long-run
    average and ``V_j`` block sums of ``a``. The standard error comes from a
    bootstrap over consecutive chunks of ``chunk`` rows (rows are
    ``N_f``-dependent, so chunks are nearly independent).
    """
    if require_ballistic:
        ballistic_check(blocks)
    f = np.asarray(f_atoms, dtype=np.float64)
    rows = blocks.rows(f, n_f)
    n = rows.shape[0]
    terms = _lambda_terms(rows, n_f)
    value, euv, cross, mdt = _lambda_from_sums(terms.sum(axis=0), n)
    n_chunks = n // chunk
    if n_chunks < 30:
        chunk = max(1, n // 30)
        n_chunks = n // chunk
    sums = terms[:n_chunks * chunk].reshape(n_chunks, chunk, -1).sum(axis=1)
    rng = generator(seed, "boot", "lambda")
    idx = rng.integers(0, n_chunks, size=(n_boot, n_chunks))
    reps = np.array([_lambda_from_sums(sums[k].sum(axis=0), n_chunks * chunk)[0] for k in idx])
    Q = float(blocks.occupation() @ f)
    return LambdaEstimate(value, float(reps.std(ddof=1)), n, euv, cross, mdt, Q)


# ---------------------------------------------------------------------------
# speed derivative and Einstein relation
# ---------------------------------------------------------------------------


def _speeds(dist, lam, replicas, horizon, seed, ell, f_atoms=None, label="speed"):
    """Per-replica ``X_n.ell / n`` and optional site averages, common random numbers over ``lam``."""
    ell = np.asarray(ell, dtype=np.float64)
    start = np.zeros(dist.d, dtype=np.int64)
    f = None if f_atoms is None else np.atleast_2d(np.asarray(f_atoms, dtype=np.float64))

    def one(r):
        fld = EnvironmentField(dist, int(derive_key(seed, "env", label, r)))
        occ = occupation(PerturbedView(fld, lam), start, horizon, walker_key(seed, label, r))
        avg = None if f is None else f @ occ.counts[-1].sum(axis=1) / horizon
        return occ.positions[-1] @ ell / horizon, avg

    out = pmap(one, range(replicas))
    v = np.array([o[0] for o in out])
    avg = None if f is None else np.vstack([o[1] for o in out])
    return v, avg


@dataclass
class SpeedDerivativeReport:
    lams: list
    v0: Estimate
    slopes: dict
    intercept: Estimate
    Q_dxi: Estimate
    Lambda_domega: LambdaEstimate | None
    predicted: Estimate

    def agrees(self, which: str = "intercept", z: float = 3.0) -> bool:
        est = self.intercept if which == "intercept" else self.slopes[min(self.lams)]
        return abs(est.value - self.predicted.value) <= z * math.hypot(est.stderr, self.predicted.stderr)


def speed_derivative(dist: EnvDistribution, lams, replicas: int, horizon: int, seed: int, ell=(1, 0),
                     renewal_horizon: int | None = None, balanced: bool | None = None) -> SpeedDerivativeReport:
    """Finite-difference slopes ``(v_lam - v_0) / lam`` against ``Q(d(xi)) + Lambda(d(omega))``.

    All ``lam`` share the field and the walker uniforms of each replica, so
    the differences are strongly correlated. For a balanced base ``Lambda``
    is set to 0.
    """
    lams = sorted(lams)
    if len(lams) < 3:
        raise ValueError("speed derivative needs at least three values of lambda")
    ell = np.asarray(ell, dtype=np.float64)
    dxi = local_drift(dist.xi) @ ell
    dom = local_drift(dist.omega) @ ell
    v0, qx = _speeds(dist, 0.0, replicas, horizon, seed, ell, dxi)
    v0_est = mean_ci(v0)
    if v0_est.lo <= 0 and not (balanced if balanced is not None else dist.balanced):
        raise NotBallistic("base speed does not exclude 0")
    slopes = {}
    per = []
    for lam in lams:
        check_lambda(lam, dist.kappa)
        vl, _ = _speeds(dist, lam, replicas, horizon, seed, ell)
        d = (vl - v0) / lam
        slopes[lam] = mean_ci(d)
        per.append(d)
    # per-replica linear fit of the difference quotients, extrapolated to lambda = 0
    L = np.asarray(lams)
    D = np.asarray(per)  # (n_lams, replicas)
    b = ((L - L.mean())[:, None] * D).sum(axis=0) / ((L - L.mean()) ** 2).sum()
    intercept = mean_ci(D.mean(axis=0) - b * L.mean())
    q_est = mean_ci(qx[:, 0])
    bal = dist.balanced if balanced is None else balanced
    if bal:
        lam_est = None
        pred = q_est
    else:
        blocks = renewal_blocks(dist, max(30, replicas), renewal_horizon or horizon, seed, ell)
        lam_est = lambda_operator(blocks, dom, n_f=1, seed=seed)
        pred = Estimate(q_est.value + lam_est.value, math.hypot(q_est.stderr, lam_est.stderr), q_est.n)
    return SpeedDerivativeReport(lams, v0_est, slopes, intercept, q_est, lam_est, pred)


@dataclass
class EinsteinRow:
    lam: float
    v_over_lam: Estimate
    Q_domega: Estimate
    lam_Q_dxi: Estimate
    identity_gap: Estimate


@dataclass
class EinsteinReport:
    rows: list
    D11: Estimate
    exact_slope: float | None = None

    def row(self, lam: float) -> EinsteinRow:
        return next(r for r in self.rows if r.lam == lam)


def diffusivity(dist: EnvDistribution, replicas: int, horizon: int, seed: int, axis: int = 0) -> Estimate:
    """``2 E_Q[omega(o, e_axis)]`` from occupation averages of the unperturbed walk."""
    f = dist.omega[:, 2 * axis]
    _, avg = _speeds(dist, 0.0, replicas, horizon, seed, np.eye(dist.d)[axis], f, label="diffusivity")
    return mean_ci(2 * avg[:, 0])


def einstein(dist: EnvDistribution, lams, replicas: int, horizon: int, seed: int, ell=(1, 0),
             d_replicas: int | None = None, d_horizon: int | None = None) -> EinsteinReport:
    """``v_lam / lam`` on a grid, the split ``Q_lam[d(omega)] + lam Q_lam[d(xi)]`` and ``D_11``.

    For a homogeneous base the exact slope is ``2 omega(e1)`` times the
    ``ell``-component, reported in ``exact_slope``.
    """
    ell = np.asarray(ell, dtype=np.float64)
    dom = local_drift(dist.omega) @ ell
    dxi = local_drift(dist.xi) @ ell
    rows = []
    for lam in sorted(lams):
        check_lambda(lam, dist.kappa)
        v, avg = _speeds(dist, lam, replicas, horizon, seed, ell, np.vstack([dom, dxi]), label="einstein")
        rows.append(EinsteinRow(lam, mean_ci(v / lam), mean_ci(avg[:, 0]), mean_ci(lam * avg[:, 1]),
                                mean_ci(v - avg[:, 0] - lam * avg[:, 1])))
    D = diffusivity(dist, d_replicas or replicas, d_horizon or horizon, seed)
    exact = None
    if dist.n_atoms == 1 and abs(dom[0]) < 1e-15:
        exact = float(dxi[0])  # v_lam = lam d(xi).ell for a balanced homogeneous base
    return EinsteinReport(rows, D, exact)


@dataclass
class SecondMomentReport:
    n_grid: list
    Q: float
    scaled: dict

    def ratio(self, a: int, b: int) -> float:
        return self.scaled[b].value / self.scaled[a].value


def second_moment_probe(dist: EnvDistribution, lam: float, f_atoms, n_grid, replicas: int,
                        seed: int, burn_in: int = 0) -> SecondMomentReport:
    """``E[(sum_{i<=n} (f(zeta_i) - Qf))^2] / n`` across ``n``; ``Qf`` from a separate long run."""
    check_lambda(lam, dist.kappa)
    f = np.asarray(f_atoms, dtype=np.float64)
    n_grid = sorted(int(n) for n in n_grid)
    start = np.zeros(dist.d, dtype=np.int64)
    _, qavg = _speeds(dist, lam, replicas, 20 * n_grid[-1], seed, np.eye(dist.d)[0], f, label="qf")
    Q = float(qavg.mean())
    cps = [burn_in] + [burn_in + n for n in n_grid]
    sq = np.empty((replicas, len(n_grid)))
    for r in range(replicas):
        fld = EnvironmentField(dist, int(derive_key(seed, "env", "second", r)))
        occ = occupation(PerturbedView(fld, lam), start, cps[-1], walker_key(seed, "second", r), cps)
        s = occ.site_sum(f)
        sq[r] = ((s[1:] - s[0]) - Q * np.asarray(n_grid)) ** 2 / np.asarray(n_grid)
    return SecondMomentReport(n_grid, Q, {n: mean_ci(sq[:, k]) for k, n in enumerate(n_grid)})
