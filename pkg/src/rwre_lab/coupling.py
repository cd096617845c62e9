"""Gambler's ruin closed forms and the slow-chain coupling used for exit-time bounds.

The slow chain ``Y`` lives on ``{0, 1, ...}`` and moves only when ``X.e1``
changes: it steps up from 0, steps down when ``|X.e1|`` decreases, and flips
a coin ``B`` when ``|X.e1|`` increases. ``Z`` is ``Y`` sampled at the
e1-move times of ``X``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .env import EnvironmentField, PerturbedView, site_atom
from .rng import derive_key, uniform
from .walk import LevelClock, _pick, passage, walker_key


# ---------------------------------------------------------------------------
# one-dimensional closed forms
# ---------------------------------------------------------------------------


def gambler_ruin(q: float, i: int, j: int) -> float:
    """P(walk from 0 with up/down ratio ``q`` visits ``-j`` before ``i``)."""
    if q <= 0:
        raise ValueError("q must be positive")
    if i < 1 or j < 1:
        raise ValueError("i, j must be >= 1")
    if q == 1:
        raise ValueError("q = 1 is degenerate; the limit is i / (i + j)")
    # expm1 keeps precision for q near 1; for q > 1 factor out q^(i+j) to avoid overflow
    lq = math.log(q)
    if q < 1:
        return math.expm1(i * lq) / math.expm1((i + j) * lq)
    return math.exp(-j * lq) * math.expm1(-i * lq) / math.expm1(-(i + j) * lq)


def gambler_ruin_limit(i: int, j: int) -> float:
    return i / (i + j)


def never_visit(q: float, j: int) -> float:
    """P(walk from 0 never visits ``-j``); needs ``q > 1`` (drift away from ``-j``)."""
    if q <= 1:
        raise ValueError("never_visit needs q > 1")
    return -math.expm1(-j * math.log(q))


def ruin_by_solve(q: float, i: int, j: int) -> float:
    """Same probability from the absorbing chain on ``{-j, ..., i}``."""
    p = q / (1 + q)
    n = i + j - 1  # interior states -j+1 .. i-1
    A = sp.lil_matrix((n, n))
    b = np.zeros(n)
    for s in range(n):
        A[s, s] = 1.0
        if s + 1 < n:
            A[s, s + 1] = -p
        if s - 1 >= 0:
            A[s, s - 1] = -(1 - p)
        else:
            b[s] = 1 - p  # step onto -j
    x = spla.spsolve(A.tocsc(), b)
    return float(x[j - 1])


def z_probs(lam: float, kappa: float, away: bool = False):
    """Up/down probabilities of the reflected chain off the origin."""
    r = lam / kappa
    up = (1 + r) / 2 if away else (1 - r) / 2
    return up, 1 - up


def expected_S(N: int, up: float) -> float:
    """E[first hitting time of N | Z_0 = 0] for the reflected birth-death chain."""
    down = 1 - up
    m = 1.0  # 0 -> 1 is forced
    total = 1.0
    for _ in range(2, N + 1):
        m = 1 / up + (down / up) * m
        total += m
    return total


def top_probability(N: int, up: float) -> float:
    """P^1(Z hits N before 0)."""
    if N == 1:
        return 1.0
    qm = (1 - up) / up
    if qm == 1:
        return 1 / N
    # mirror Z about 1: hitting N first is visiting -(N-1) before +1
    return gambler_ruin(qm, 1, N - 1)


# ---------------------------------------------------------------------------
# coupled simulation
# ---------------------------------------------------------------------------


@nb.njit(cache=True, nogil=True)
def _couple(env_key, period, cumw, cum_probs, dirs, start, horizon, walk_key, coin_key,
            lam, kappa, gap, n_levels):
    """Joint (X, Y) evolution with per-step invariant checks.

    Returns (violation_step, n_e1_moves, z_up, z_down, x_first, y_first)
    where ``x_first[n]`` / ``y_first[n]`` are the first times
    ``|X.e1| = n * gap`` / ``Y = n * gap`` (-1 if unreached). ``z_up[y]`` and
    ``z_down[y]`` count the moves of Z out of state ``y >= 1`` (the last
    entry pools all higher states).
    """
    x = start.copy()
    y = abs(x[0])
    x_first = np.full(n_levels + 1, -1, dtype=np.int64)
    y_first = np.full(n_levels + 1, -1, dtype=np.int64)
    x_first[0] = 0
    y_first[0] = 0
    moves = 0
    cap = n_levels * gap + 1
    z_up = np.zeros(cap + 1, dtype=np.int64)
    z_down = np.zeros(cap + 1, dtype=np.int64)
    bad = -1
    target = 1.0 - lam / kappa
    for i in range(horizon):
        a = site_atom(env_key, x, period, cumw)
        j = _pick(cum_probs, a, uniform(walk_key, i))
        old = abs(x[0])
        x += dirs[j]
        new = abs(x[0])
        if j < 2:
            moves += 1
            prev_y = y
            if y == 0:
                y = 1
            elif new > old:
                # p = probability that an e1 move increases |X.e1|
                pp = cum_probs[a, 0]
                pm = cum_probs[a, 1] - cum_probs[a, 0]
                outward = pp if x[0] - dirs[j, 0] >= 0 else pm
                if x[0] - dirs[j, 0] == 0:
                    outward = pp + pm  # both directions increase |X.e1| at 0
                p = outward / (pp + pm)
                pb = target / (2 * p)
                if pb > 1.0 + 1e-12:
                    return i, moves, z_up, z_down, x_first, y_first
                y += 1 if uniform(coin_key, i) < pb else -1
            else:
                y -= 1
            if prev_y > 0:
                if y > prev_y:
                    z_up[min(prev_y, cap)] += 1
                else:
                    z_down[min(prev_y, cap)] += 1
        diff = abs(x[0]) - y
        if diff < 0 or diff % 2 != 0:
            return i, moves, z_up, z_down, x_first, y_first
        ax = abs(x[0])
        if ax % gap == 0 and ax // gap <= n_levels and x_first[ax // gap] < 0:
            x_first[ax // gap] = i + 1
        if y % gap == 0 and y // gap <= n_levels and y_first[y // gap] < 0:
            y_first[y // gap] = i + 1
            if x_first[y // gap] < 0 or x_first[y // gap] > i + 1:
                return i, moves, z_up, z_down, x_first, y_first
    return bad, moves, z_up, z_down, x_first, y_first


@dataclass
class CouplingReport:
    steps: int
    violations: int
    first_violation: int
    e1_moves: int
    z_up: int
    z_down: int
    pairs_checked: int
    x_first: list = field(default_factory=list)
    y_first: list = field(default_factory=list)
    z_up_by_state: np.ndarray = field(default=None, repr=False)
    z_down_by_state: np.ndarray = field(default=None, repr=False)


def run_coupling(view: PerturbedView, clock: LevelClock, horizon: int, seed: int, replica: int = 0,
                 n_levels: int = 8, start=None) -> CouplingReport:
    """Simulate ``(X, Y)`` for ``horizon`` steps and check parity and domination at every step.

    Domination: whenever ``Y`` first reaches level ``n``, ``|X.e1|`` must
    already have reached it.
    """
    if not 0 < view.lam < view.dist.kappa / 2:
        raise ValueError("coupling needs lambda in (0, kappa/2)")
    env_key, period, cumw, cum_probs, dirs = view.kernel_args()
    start = np.zeros(view.d, dtype=np.int64) if start is None else np.asarray(start, np.int64)
    wk = walker_key(seed, "couple", replica)
    ck = derive_key(seed, "bcoin", "couple", replica)
    bad, moves, zu, zd, xf, yf = _couple(env_key, period, cumw, cum_probs, dirs, start, int(horizon),
                                          wk, ck, float(view.lam), float(view.dist.kappa),
                                          clock.gap, n_levels)
    pairs = int(np.sum(yf[1:] >= 0))
    return CouplingReport(int(horizon), int(bad >= 0), int(bad), int(moves), int(zu.sum()), int(zd.sum()), pairs,
                          xf.tolist(), yf.tolist(), zu, zd)


@nb.njit(cache=True)
def _z_chain(key, up, N, start, max_steps):
    """Steps for the reflected chain to go from ``start`` to ``N`` (-1 past ``max_steps``)."""
    z = start
    for n in range(max_steps):
        if z == N:
            return n
        if z == 0:
            z = 1
        elif uniform(key, n) < up:
            z += 1
        else:
            z -= 1
    return -1


@nb.njit(cache=True)
def _z_excursion(key, up, N):
    """From 1, run until 0 or N; returns (steps, 1 if N was hit)."""
    z = 1
    n = 0
    while z != 0 and z != N:
        if uniform(key, n) < up:
            z += 1
        else:
            z -= 1
        n += 1
    return n, 1 if z == N else 0


def z_hitting_probability_mc(lam: float, kappa: float, N: int, replicas: int, seed: int,
                             away: bool = False) -> tuple[float, float]:
    up, _ = z_probs(lam, kappa, away)
    hits = np.array([_z_excursion(derive_key(seed, "zchain", r), up, N)[1] for r in range(replicas)])
    p = hits.mean()
    return float(p), float(math.sqrt(max(p * (1 - p), 1e-300) / replicas))


def z_one_step_ruin_mc(lam: float, kappa: float, replicas: int, seed: int, z0: int = 5):
    """Fraction of Z-chain runs from ``z0 > 1`` that hit ``z0 - 1`` before ``z0 + 1``."""
    up, _ = z_probs(lam, kappa)
    u = np.array([uniform(derive_key(seed, "zruin"), r) for r in range(replicas)])
    down = (u >= up).mean()
    return float(down), float(math.sqrt(down * (1 - down) / replicas))


# ---------------------------------------------------------------------------
# exit-time suite
# ---------------------------------------------------------------------------


@dataclass
class ExitTimeCell:
    lam: float
    n: int
    gap: int
    mean_T: float
    se_T: float
    censored: float
    exp_moment: float
    exact_S: float
    exact_S_away: float
    p_top: float
    p_top_away: float

    @property
    def scaled_T(self) -> float:
        return self.lam ** 2 * self.mean_T / self.n

    @property
    def scaled_S(self) -> float:
        return self.lam ** 2 * self.exact_S / self.n

    @property
    def scaled_S_away(self) -> float:
        return self.lam ** 2 * self.exact_S_away / self.n


def exit_time_cell(view: PerturbedView, n: int, replicas: int, seed: int, s: float = 0.1,
                   horizon_factor: float = 200.0) -> ExitTimeCell:
    """Monte Carlo ``T~_n`` for one field per replica plus exact reflected-chain quantities."""
    lam = view.lam
    clock = LevelClock(lam)
    N = clock.offset(n)
    horizon = int(horizon_factor * n / lam ** 2)
    times = []
    cens = 0
    for r in range(replicas):
        fld = EnvironmentField(view.dist, int(derive_key(seed, "env", "exit", r)))
        v = PerturbedView(fld, lam)
        t, _, hit, _, _ = passage(v, np.zeros(view.d, np.int64), N, N, horizon, walker_key(seed, "exit", r))
        if hit == 0:
            cens += 1
        times.append(t)
    T = np.asarray(times, dtype=np.float64)
    kappa = view.dist.kappa
    up, _ = z_probs(lam, kappa)
    up_a, _ = z_probs(lam, kappa, away=True)
    return ExitTimeCell(
        lam, n, clock.gap, float(T.mean()), float(T.std(ddof=1) / math.sqrt(T.size)), cens / replicas,
        float(np.mean(np.exp(s * lam ** 2 * T / n))),
        expected_S(N, up), expected_S(N, up_a), top_probability(N, up), top_probability(N, up_a))


def envelope(lam: float, kappa: float, rho: float, gap: int, n: float, m: float):
    """Two gambler's-ruin bounds on ``P(T_{-n} < T_m)`` with ratios ``1 + 4 lam/kappa`` and ``1 + rho lam``."""
    i, j = round(m * gap), round(n * gap)
    lo = gambler_ruin(1 + 4 * lam / kappa, i, j)
    hi = gambler_ruin(1 + rho * lam, i, j)
    return lo, hi
