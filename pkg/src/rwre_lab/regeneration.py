"""Coin-split level construction and the 1-dependent regeneration times.

Levels are the hyperplanes ``x.e1 = J * gap``. On first arrival at level
``J`` at the point ``x``, a coin with ``P(1) = beta`` chooses the law of the
next-level hitting point: ``mu1`` (the exit law from ``x + gap/2 e1`` through
the top of the one-gap slab, conditioned on leaving through the top) or
``mu0 = (top - beta mu1) / (1 - beta)`` where ``top`` is the hitting law of
level ``J + 1`` from ``x``. The path up to that hitting point is then drawn
from the quenched law conditioned on it (Doob transform). Mixing over the coin
gives back the quenched law of the walk.

All hitting laws are exact because the field is periodic in the lateral
coordinates with period ``L``: the top law is solved on a band reaching
``depth`` levels below ``J`` with the depth grown until the mass escaping
through the artificial floor is below ``leak_tol``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .env import PerturbedView, unit_vectors
from .rng import derive_key, uniform
from .slab import AbsorbingSystem, Slab, h_transform_walk, slab_system
from .stats import Estimate, InsufficientData, mean_ci, ratio_ci
from .walk import LevelClock, WalkPath

INF = -1
CENSORED = -2


class ConstructionError(RuntimeError):
    pass


@dataclass
class LevelLaws:
    """Exact laws attached to level ``J`` for every lateral starting point."""

    J: int
    band: Slab
    system: AbsorbingSystem
    H: np.ndarray          # (band interior, n_lat): exit probability at each top point
    top: np.ndarray        # (n_lat, n_lat): row = start on level J, normalized over the top
    mu1: np.ndarray        # (n_lat, n_lat)
    leak: float

    def ratio_min(self) -> np.ndarray:
        """Per lateral start, ``min_w top(w) / mu1(w)``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.mu1 > 0, self.top / self.mu1, np.inf)
        return r.min(axis=1)


@dataclass(frozen=True)
class SplitMeasures:
    x: np.ndarray
    top: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    beta: float


def split(top: np.ndarray, mu1: np.ndarray, beta: float) -> np.ndarray:
    if beta >= 1:
        raise ValueError("beta must be < 1")
    return (top - beta * mu1) / (1 - beta)


class LevelSolver:
    """Builds and caches :class:`LevelLaws` for a laterally periodic field."""

    def __init__(self, view: PerturbedView, clock: LevelClock, depth: int = 12, leak_tol: float = 1e-7,
                 max_depth: int = 96, cache_levels: int = 4):
        L = view.field.lateral_period
        if L is None:
            raise ValueError("regeneration needs a laterally periodic field")
        self.view = view
        self.clock = clock
        self.L = int(L)
        self.d = view.d
        self.depth = depth
        self.leak_tol = leak_tol
        self.max_depth = max_depth
        self.cache: OrderedDict = OrderedDict()
        self.cache_levels = cache_levels
        self.n_lat = self.L ** (self.d - 1)

    def laws(self, J: int) -> LevelLaws:
        if J in self.cache:
            self.cache.move_to_end(J)
            return self.cache[J]
        laws = self._build(J)
        self.cache[J] = laws
        if len(self.cache) > self.cache_levels:
            self.cache.popitem(last=False)
        return laws

    def _build(self, J: int) -> LevelLaws:
        G, L, n_lat = self.clock.gap, self.L, self.n_lat
        depth = self.depth
        while True:
            band = Slab(self.d, (J - depth) * G, (J + 1) * G, L)
            system = slab_system(band, self.view)
            rows = depth * G * n_lat - n_lat + np.arange(n_lat)  # layer x1 = J*G
            H_all = system.hitting_columns(np.arange(2 * n_lat))
            leak = float(H_all[rows, :n_lat].sum(axis=1).max())
            if leak <= self.leak_tol or depth >= self.max_depth:
                break
            depth *= 2
        self.depth = max(self.depth, depth)
        H = H_all[:, n_lat:]
        top = H[rows]
        top = top / top.sum(axis=1, keepdims=True)
        gap = Slab(self.d, J * G, (J + 1) * G, L)
        gsys = slab_system(gap, self.view)
        mid = (self.clock.half - 1) * n_lat + np.arange(n_lat)  # layer x1 = J*G + gap/2
        Hg = gsys.hitting_columns(np.arange(n_lat, 2 * n_lat))[mid]
        mu1 = Hg / Hg.sum(axis=1, keepdims=True)
        system.release()
        gsys.release()
        return LevelLaws(J, band, system, H, top, mu1, leak)

    def split_measures(self, x) -> SplitMeasures:
        x = np.asarray(x, dtype=np.int64)
        J, r = divmod(int(x[0]), self.clock.gap)
        if r:
            raise ValueError("x must lie on a level")
        laws = self.laws(J)
        li = int(Slab(self.d, 0, 2, self.L).lateral_index(x[1:])[0])
        return laws, li


@dataclass
class BetaFit:
    beta: float
    candidates: list
    site_min_ratio: np.ndarray
    levels: list

    @property
    def min_ratio(self) -> float:
        return float(self.site_min_ratio.min())


def fit_beta(solver: LevelSolver, levels, candidates=(0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0.0)) -> BetaFit:
    """Largest candidate with ``mu0 >= 0`` at every lateral site of the sampled levels."""
    mins = []
    for J in levels:
        mins.append(solver.laws(J).ratio_min())
    mins = np.concatenate(mins)
    m = float(mins.min())
    ok = [b for b in candidates if b <= m + 1e-15 and b < 1]
    if not ok:
        raise ConstructionError(f"no candidate beta validates (min ratio {m:.3g})")
    return BetaFit(max(ok), list(candidates), mins, list(levels))


def _draw(p: np.ndarray, u: float) -> int:
    c = np.cumsum(p)
    k = int(np.searchsorted(c, u * c[-1], side="right"))
    k = min(k, p.size - 1)
    while p[k] <= 0:
        k -= 1
    return k


@dataclass
class ConstructedPath:
    path: WalkPath
    level_times: np.ndarray
    coins: np.ndarray
    violations: int
    leak: float


class Constructor:
    """Samples paths from the coin-split law, one inter-level segment at a time."""

    def __init__(self, solver: LevelSolver, beta: float):
        if not 0 <= beta < 1:
            raise ValueError("beta must be in [0, 1)")
        self.solver = solver
        self.beta = beta
        self.dirs = unit_vectors(solver.d)

    def sample(self, n_levels: int, seed: int, replica: int, start_lat=None, coins=None,
               max_segment: int = 20_000_000) -> ConstructedPath:
        """Path from ``(0, start_lat)`` until level ``n_levels`` is first hit.

        ``coins`` overrides the coin sequence (one bit per level).
        """
        s = self.solver
        G = s.clock.gap
        d = s.d
        x = np.zeros(d, dtype=np.int64)
        if start_lat is not None:
            x[1:] = start_lat
        start = x.copy()
        coin_key = derive_key(seed, "coin", replica)
        exit_key = derive_key(seed, "exit", replica)
        walk_key = derive_key(seed, "walk", "segment", replica)
        pieces = []
        level_times = np.zeros(n_levels + 1, dtype=np.int64)
        eps = np.zeros(n_levels, dtype=np.int8)
        t = 0
        viol = 0
        leak = 0.0
        for J in range(n_levels):
            laws, li = s.split_measures(x)
            leak = max(leak, laws.leak)
            top, mu1 = laws.top[li], laws.mu1[li]
            e = int(coins[J]) if coins is not None else int(uniform(coin_key, J) < self.beta)
            if e:
                mu = mu1
            else:
                mu = split(top, mu1, self.beta)
                if mu.min() < -1e-12:
                    # beta too large here: fall back to the exact top law, coin forced to 0
                    viol += 1
                    mu = top
                mu = np.clip(mu, 0.0, None)
            eps[J] = e
            y = _draw(mu, uniform(exit_key, J))
            band = laws.band
            s0 = band.index(x)
            steps, used = h_transform_walk(band.geometry.nbr, laws.system.probs, laws.H[:, y],
                                           band.n_lat + y, s0, np.uint64(walk_key), np.int64(J) << 32, max_segment)
            if used < 0:
                raise ConstructionError("segment exceeded max_segment steps")
            pieces.append(steps)
            x = x + self.dirs[steps.astype(np.int64)].sum(axis=0)
            t += steps.size
            level_times[J + 1] = t
            if x[0] != (J + 1) * G:
                raise ConstructionError("segment did not end on the next level")
        steps = np.concatenate(pieces) if pieces else np.zeros(0, np.int8)
        return ConstructedPath(WalkPath(start, steps), level_times, eps, viol, leak)


# ---------------------------------------------------------------------------
# regeneration times
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _extract(off, level_times, coins, G, W, min_steps):
    """Scan for S_k, R_k, M_k and the regeneration times.

    ``off`` is ``(X_t - X_0).e1``; ``level_times[j]`` the first hitting time
    of level ``j`` (for ``j <= n_levels``), ``coins[j]`` the coin of level ``j``.
    Returns arrays (S, R, M, N, block_id) over all S-events and arrays
    (tau, tau_tilde, K) over regenerations. ``R`` is ``-1`` for a declared
    infinite backtrack time and ``-2`` when undecidable (censored).
    """
    n_levels = level_times.shape[0] - 1
    T = off.shape[0] - 1
    cap = n_levels + 1
    S = np.empty(cap, np.int64)
    R = np.empty(cap, np.int64)
    M = np.empty(cap, np.int64)
    N = np.empty(cap, np.int64)
    blk = np.empty(cap, np.int64)
    tau = np.empty(cap, np.int64)
    ttil = np.empty(cap, np.int64)
    K = np.empty(cap, np.int64)
    ns = 0
    nt = 0
    base = 0
    m_off = 0
    k = 0
    while True:
        # next level n >= max(base, m_off / G) with a 1-coin
        n = max(base, (m_off + G - 1) // G)
        while n < n_levels and coins[n] == 0:
            n += 1
        if n + 1 > n_levels:
            break
        s = level_times[n + 1]
        k += 1
        floor = n * G
        t = s
        mx = off[s]
        found = -1
        while t <= T:
            v = off[t]
            if v > mx:
                mx = v
            if v <= floor:
                found = t
                break
            t += 1
        S[ns] = s
        blk[ns] = nt
        if found >= 0:
            R[ns] = found
            nn = (mx - (n + 1) * G) // G + 1
            N[ns] = nn
            m_off = (n + 1) * G + nn * G
            M[ns] = m_off
            ns += 1
            continue
        if n + 1 + W <= n_levels and T - s >= min_steps:
            R[ns] = -1
            N[ns] = -1
            M[ns] = -1
            ns += 1
            tau[nt] = s
            ttil[nt] = level_times[n]
            K[nt] = k
            nt += 1
            base = n + 1
            m_off = base * G
            k = 0
            continue
        R[ns] = -2
        N[ns] = -1
        M[ns] = -1
        ns += 1
        break
    return S[:ns], R[:ns], M[:ns], N[:ns], blk[:ns], tau[:nt], ttil[:nt], K[:nt]


@dataclass
class RegenerationRecord:
    S: np.ndarray
    R: np.ndarray
    M: np.ndarray
    N: np.ndarray
    tau: np.ndarray
    tau_tilde: np.ndarray
    K: np.ndarray
    censored: bool
    positions: np.ndarray = field(repr=False)
    coins: np.ndarray = field(repr=False)
    level_times: np.ndarray = field(repr=False)

    @property
    def n_regen(self) -> int:
        return int(self.tau.size)

    def p_lambda(self) -> tuple[int, int]:
        """(S-events with a declared infinite backtrack time, decided S-events)."""
        decided = self.R != CENSORED
        return int(np.sum(self.R == INF)), int(decided.sum())


def extract_record(cp: ConstructedPath, G: int, W: int = 10, min_steps: int = 0) -> RegenerationRecord:
    pos = cp.path.positions
    off = pos[:, 0] - pos[0, 0]
    S, R, M, N, _, tau, tt, K = _extract(off, cp.level_times, cp.coins.astype(np.int64), G, W, min_steps)
    censored = bool(R.size and R[-1] == CENSORED)
    return RegenerationRecord(S, R, M, N, tau, tt, K, censored, pos, cp.coins, cp.level_times)


def check_no_backtrack(rec: RegenerationRecord, G: int) -> int:
    """Number of blocks where the path after ``tau_k`` reaches ``X_{tau_k}.e1 - G``."""
    bad = 0
    e1 = rec.positions[:, 0]
    for k in range(rec.tau.size):
        t = rec.tau[k]
        if e1[t:].min() <= e1[t] - G:
            bad += 1
    return bad


@dataclass
class RegenStats:
    """Inter-regeneration samples from ``k >= 1`` blocks, grouped by replica."""

    lam: float
    beta: float
    gap: int
    dtau: list
    dx: list
    z: list
    first_dtau: np.ndarray
    first_x: np.ndarray
    K: np.ndarray
    p_inf: int
    p_decided: int
    censored_replicas: int
    violations: int

    def pooled(self, name: str) -> np.ndarray:
        parts = getattr(self, name)
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def n_blocks(self) -> int:
        return int(sum(len(a) for a in self.dtau))

    def lag_corr(self, series: np.ndarray | list, lag: int) -> Estimate:
        """Lag correlation pooled within replicas (pairs never straddle replicas)."""
        parts = series
        allv = np.concatenate(parts)
        mu = allv.mean()
        num = 0.0
        den = float(((allv - mu) ** 2).sum())
        n_pairs = 0
        r1 = 0.0
        for p in parts:
            c = p - mu
            if c.size > lag:
                num += float(c[:-lag] @ c[lag:])
                n_pairs += c.size - lag
            if c.size > 1:
                r1 += float(c[:-1] @ c[1:])
        if n_pairs < 30 or den == 0:
            raise InsufficientData("not enough block pairs")
        rho = num / den
        rho1 = r1 / den
        var = (1 + 2 * rho1 ** 2) / n_pairs if lag >= 2 else 1.0 / n_pairs
        return Estimate(rho, math.sqrt(var), n_pairs)


def extract_regenerations(records: list, lam: float, beta: float, G: int, fields=None, f_atoms=None,
                          violations: int = 0) -> RegenStats:
    """Block samples ``(dtau, dX, Z(f))`` for ``k >= 1``; the block before ``tau_1`` is kept apart."""
    dtau, dx, zs, fd, fx, Ks = [], [], [], [], [], []
    p_inf = p_dec = cens = 0
    for i, rec in enumerate(records):
        a, b = rec.p_lambda()
        p_inf += a
        p_dec += b
        cens += int(rec.censored)
        Ks.append(rec.K)
        if rec.tau.size == 0:
            continue
        fd.append(rec.tau[0])
        fx.append(rec.positions[rec.tau[0], 0] - rec.positions[0, 0])
        if rec.tau.size < 2:
            continue
        t = rec.tau
        dtau.append(np.diff(t).astype(np.float64))
        dx.append(np.diff(rec.positions[t], axis=0).astype(np.float64))
        if f_atoms is not None and fields is not None:
            atoms = fields[i].atom_index(rec.positions[t[0]:t[-1]])
            fa = np.asarray(f_atoms, dtype=np.float64)
            vals = fa[atoms] if fa.ndim == 1 else fa[atoms].T
            cs = np.concatenate([[0.0], np.cumsum(vals)]) if fa.ndim == 1 else None
            zs.append(np.diff(cs[t - t[0]]))
    if sum(len(a) for a in dtau) < 2:
        raise InsufficientData("fewer than two complete regeneration blocks")
    return RegenStats(lam, beta, G, dtau, [d[:, 0] for d in dx], zs, np.asarray(fd, np.float64),
                      np.asarray(fx, np.float64), np.concatenate(Ks) if Ks else np.zeros(0),
                      p_inf, p_dec, cens, violations)


# ---------------------------------------------------------------------------
# run helpers and reports
# ---------------------------------------------------------------------------


@dataclass
class RegenRun:
    stats: RegenStats
    records: list
    fit: BetaFit
    fields: list
    leak: float


def run_regeneration(dist, lam: float, replicas: int, n_levels: int, seed: int, W: int = 10,
                     rho: float | None = None, beta: float | None = None, L: int | None = None,
                     f_atoms=None, fit_levels=(0, 1, 2), candidates=None) -> RegenRun:
    """Constructed paths in ``replicas`` independent laterally periodic fields.

    ``beta`` is fitted in each field unless given; the smallest fitted value
    is then used for all replicas so that the coin law is common.
    """
    from .env import EnvironmentField

    clock = LevelClock(lam)
    G = clock.gap
    L = L or G
    fields = [EnvironmentField(dist, int(derive_key(seed, "env", "regen", r)), lateral_period=L)
              for r in range(replicas)]
    solvers = [LevelSolver(PerturbedView(f, lam), clock) for f in fields]
    cands = candidates or (0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05)
    fits = []
    for s in solvers:
        fits.append(fit_beta(s, fit_levels, cands))
        s.cache.clear()
    fit = min(fits, key=lambda f: f.beta)
    b = fit.beta if beta is None else beta
    min_steps = int(10 / ((rho or 0.5) * lam ** 2))
    records = []
    viol = 0
    leak = 0.0
    for r, s in enumerate(solvers):
        cp = Constructor(s, b).sample(n_levels, seed, r)
        viol += cp.violations
        leak = max(leak, cp.leak)
        records.append(extract_record(cp, G, W, min_steps))
        s.cache.clear()
    stats = extract_regenerations(records, lam, b, G, fields, f_atoms, viol)
    return RegenRun(stats, records, fit, fields, leak)


def rerun_extraction(run: RegenRun, W: int, rho: float | None = None) -> RegenStats:
    """Same paths, different no-backtrack window ``W``."""
    lam, G = run.stats.lam, run.stats.gap
    min_steps = int(10 / ((rho or 0.5) * lam ** 2))
    recs = []
    for rec in run.records:
        off = rec.positions[:, 0] - rec.positions[0, 0]
        S, R, M, N, _, tau, tt, K = _extract(off, rec.level_times, rec.coins.astype(np.int64), G, W, min_steps)
        censored = bool(R.size and R[-1] == CENSORED)
        recs.append(RegenerationRecord(S, R, M, N, tau, tt, K, censored, rec.positions, rec.coins,
                                       rec.level_times))
    return extract_regenerations(recs, lam, run.stats.beta, G)


@dataclass
class MomentReport:
    exp_moment: dict
    scaled_tau: dict
    scaled_dx: dict
    tail_slope: Estimate | None

    def scaling_ratio(self, which: str) -> float:
        vals = np.array([e.value for e in getattr(self, which).values()])
        return float(vals.max() / vals.min())


def tail_slope(stats: RegenStats, lam1: float, t_grid=None, min_count: int = 10,
               n_boot: int = 400, seed: int = 0) -> Estimate:
    """Slope of ``log P(beta lam1^2 dtau > t)`` against ``sqrt(t)`` with a bootstrap standard error."""
    from .rng import generator

    x = stats.beta * lam1 ** 2 * stats.pooled("dtau")
    if x.size < 30:
        raise InsufficientData("tail fit needs at least 30 blocks")
    if t_grid is None:
        hi = np.sort(x)[-min_count]
        t_grid = np.linspace(np.quantile(x, 0.5), hi, 8)

    def slope(sample):
        surv = np.array([(sample > t).mean() for t in t_grid])
        keep = surv > 0
        if keep.sum() < 3:
            return np.nan
        return np.polyfit(np.sqrt(t_grid[keep]), np.log(surv[keep]), 1)[0]

    rng = generator(seed, "boot", "tail")
    point = slope(x)
    reps = np.array([slope(x[rng.integers(0, x.size, x.size)]) for _ in range(n_boot)])
    reps = reps[np.isfinite(reps)]
    return Estimate(float(point), float(reps.std(ddof=1)), int(x.size))


def moment_suite(stats_by_lam: dict, s: float = 0.5) -> MomentReport:
    """Exponential moment of the first regeneration height, scaling of block means."""
    if len(stats_by_lam) < 2:
        raise ValueError("moment suite needs at least two values of lambda")
    em, st, sx = {}, {}, {}
    for lam, stt in sorted(stats_by_lam.items()):
        if stt.first_x.size >= 30:
            em[lam] = mean_ci(np.exp(s * stt.beta * lam * stt.first_x))
        dt = stt.pooled("dtau")
        dx = stt.pooled("dx")
        st[lam] = mean_ci(lam ** 2 * dt)
        sx[lam] = mean_ci(lam * dx)
    first = min(stats_by_lam)
    stt = stats_by_lam[first]
    try:
        ts = tail_slope(stt, LevelClock(first).lambda1)
    except InsufficientData:
        ts = None
    return MomentReport(em, st, sx, ts)


def speed_and_Q(stats: RegenStats, f_index: int | None = None) -> dict:
    """Ratio estimators ``E[dX]/E[dtau]`` and ``E[Z]/E[dtau]`` with lag-1 aware intervals."""
    dt = stats.pooled("dtau")
    out = {"v1": ratio_ci(stats.pooled("dx"), dt, lags=1)}
    if stats.z:
        out["Q"] = ratio_ci(stats.pooled("z"), dt, lags=1)
    return out


@dataclass
class EquivalenceResult:
    constructed: np.ndarray
    direct: np.ndarray
    support: np.ndarray
    test: object
    violations: int
    beta: float


def endpoint_equivalence(dist, lam: float, seed: int, samples: int, n_levels: int = 3,
                         beta: float | None = None, down: int = 1 << 40) -> EquivalenceResult:
    """Lateral coordinate of ``X_{T_n}`` under the coin construction and under direct simulation.

    Both sides use the same laterally periodic field; the direct walk is the
    plain quenched walk stopped at level ``n_levels``.
    """
    from .env import EnvironmentField
    from .stats import two_sample_multinomial
    from .walk import passage, walker_key

    clock = LevelClock(lam)
    G = clock.gap
    fld = EnvironmentField(dist, int(derive_key(seed, "env", "equivalence")), lateral_period=G)
    view = PerturbedView(fld, lam)
    solver = LevelSolver(view, clock, cache_levels=n_levels + 1)
    b = fit_beta(solver, range(n_levels)).beta if beta is None else beta
    con = Constructor(solver, b)
    start = np.zeros(view.d, dtype=np.int64)
    horizon = int(1e4 * n_levels / lam ** 2)
    a = np.empty(samples, dtype=np.int64)
    c = np.empty(samples, dtype=np.int64)
    viol = 0
    for r in range(samples):
        cp = con.sample(n_levels, seed, r)
        viol += cp.violations
        a[r] = cp.path.positions[-1, 1]
        _, x, hit, _, _ = passage(view, start, n_levels * G, down, horizon, walker_key(seed, "direct", r))
        if hit != 1:
            raise ConstructionError("direct walk did not reach the target level")
        c[r] = x[1]
    lo, hi = min(a.min(), c.min()), max(a.max(), c.max())
    support = np.arange(lo, hi + 1)
    ca = np.bincount(a - lo, minlength=support.size)
    cc = np.bincount(c - lo, minlength=support.size)
    return EquivalenceResult(ca, cc, support, two_sample_multinomial(ca, cc), viol, b)
