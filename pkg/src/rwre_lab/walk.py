"""Quenched walker dynamics, level clocks, hitting times and path observables."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator

import numba as nb
import numpy as np

from .env import EnvironmentField, PerturbedView, SitePair, direction_index, unit_vectors
from .rng import derive_key, uniform
from .env import site_atom


# ---------------------------------------------------------------------------
# level clock
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelClock:
    """Levels spaced ``1/lambda1`` apart along e1, with ``0.5/lambda1`` an integer."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("level clock needs lambda > 0")

    @property
    def half(self) -> int:
        return int(math.ceil(1.0 / (2.0 * self.lam) - 1e-12))

    @property
    def lambda1(self) -> float:
        return 0.5 / self.half

    @property
    def gap(self) -> int:
        """Lattice distance between consecutive levels."""
        return 2 * self.half

    def offset(self, n: float) -> int:
        """e1-offset of level ``n`` (``n`` a multiple of 1/2)."""
        off = n * self.gap
        if abs(off - round(off)) > 1e-9:
            raise ValueError(f"level {n} is not a multiple of 1/2")
        return int(round(off))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True, inline="always")
def _pick(cum, a, u):
    k = cum.shape[1]
    for j in range(k - 1):
        if u < cum[a, j]:
            return j
    return k - 1


@nb.njit(cache=True, nogil=True)
def _simulate(env_key, period, cumw, cum_probs, dirs, start, horizon, walk_key, counter0):
    steps = np.empty(horizon, dtype=np.int8)
    atoms = np.empty(horizon, dtype=np.int16)
    x = start.copy()
    for n in range(horizon):
        a = site_atom(env_key, x, period, cumw)
        j = _pick(cum_probs, a, uniform(walk_key, counter0 + n))
        steps[n] = j
        atoms[n] = a
        x += dirs[j]
    return steps, atoms


@nb.njit(cache=True, nogil=True)
def _occupation(env_key, period, cumw, cum_probs, dirs, start, horizon, walk_key, counter0,
                checkpoints):
    """Run ``horizon`` steps without storing the path.

    Returns the transition-count table ``counts[atom, dir]`` at every checkpoint
    and the position there; both are sufficient for all site-function and
    a/h sums along the path.
    """
    n_atoms = cum_probs.shape[0]
    k = cum_probs.shape[1]
    d = dirs.shape[1]
    counts = np.zeros((n_atoms, k), dtype=np.int64)
    snaps = np.zeros((checkpoints.shape[0], n_atoms, k), dtype=np.int64)
    pos = np.zeros((checkpoints.shape[0], d), dtype=np.int64)
    x = start.copy()
    c = 0
    for n in range(horizon):
        while c < checkpoints.shape[0] and checkpoints[c] == n:
            snaps[c] = counts
            pos[c] = x
            c += 1
        a = site_atom(env_key, x, period, cumw)
        j = _pick(cum_probs, a, uniform(walk_key, counter0 + n))
        counts[a, j] += 1
        x += dirs[j]
    while c < checkpoints.shape[0]:
        snaps[c] = counts
        pos[c] = x
        c += 1
    return snaps, pos


@nb.njit(cache=True, nogil=True)
def _passage(env_key, period, cumw, cum_probs, dirs, start, horizon, walk_key, counter0,
             up, down, half):
    """Run until e1-offset ``up`` or ``-down`` is hit (``down <= 0`` disables it).

    Returns (time, position, level_hit, half_time, half_pos) where level_hit is
    +1, -1 or 0 (horizon) and half_* record the first passage of offset ``half``.
    """
    x = start.copy()
    x0 = start[0]
    half_t = -1
    half_pos = start.copy()
    for n in range(horizon):
        a = site_atom(env_key, x, period, cumw)
        j = _pick(cum_probs, a, uniform(walk_key, counter0 + n))
        x += dirs[j]
        off = x[0] - x0
        if half_t < 0 and off == half:
            half_t = n + 1
            half_pos[:] = x
        if off == up:
            return n + 1, x, 1, half_t, half_pos
        if down > 0 and off == -down:
            return n + 1, x, -1, half_t, half_pos
    return horizon, x, 0, half_t, half_pos


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WalkPath:
    """Start point plus step direction indices (``int8``)."""

    start: np.ndarray
    steps: np.ndarray
    atoms: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=np.int64))
        object.__setattr__(self, "steps", np.asarray(self.steps, dtype=np.int8))

    @property
    def d(self) -> int:
        return self.start.size

    def __len__(self) -> int:
        return self.steps.size

    @cached_property
    def positions(self) -> np.ndarray:
        inc = unit_vectors(self.d)[self.steps]
        out = np.empty((self.steps.size + 1, self.d), dtype=np.int64)
        out[0] = self.start
        np.cumsum(inc, axis=0, out=out[1:])
        out[1:] += self.start
        return out

    @property
    def e1(self) -> np.ndarray:
        return self.positions[:, 0]

    @classmethod
    def from_vectors(cls, start, vectors) -> "WalkPath":
        steps = [direction_index(v) for v in vectors]
        return cls(np.asarray(start), np.asarray(steps, dtype=np.int8))

    def site_atoms(self, fld: EnvironmentField) -> np.ndarray:
        """Atom index at ``X_0..X_{n-1}`` (the sites from which steps were taken)."""
        if self.atoms is not None and len(self.atoms) == len(self):
            return np.asarray(self.atoms, dtype=np.int64)
        return fld.atom_index(self.positions[:-1]) if len(self) else np.zeros(0, np.int64)

    def spool(self, fh) -> None:
        """Write a binary trace: magic, d, n, start coordinates, step bytes."""
        fh.write(b"RWTR")
        fh.write(struct.pack("<II", self.d, len(self)))
        fh.write(self.start.astype("<i8").tobytes())
        fh.write(self.steps.tobytes())

    @classmethod
    def replay(cls, fh) -> "WalkPath":
        if fh.read(4) != b"RWTR":
            raise ValueError("not a walk trace")
        d, n = struct.unpack("<II", fh.read(8))
        start = np.frombuffer(fh.read(8 * d), dtype="<i8").astype(np.int64)
        steps = np.frombuffer(fh.read(n), dtype=np.int8).copy()
        return cls(start, steps)


def walker_key(master_seed: int, *path) -> np.uint64:
    return derive_key(master_seed, "walk", *path)


def simulate(view: PerturbedView, start, horizon: int, key, counter0: int = 0) -> WalkPath:
    """Quenched path of ``horizon`` steps under ``omega^lambda`` using stream ``key``."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    env_key, period, cumw, cum_probs, dirs = view.kernel_args()
    start = np.asarray(start, dtype=np.int64)
    steps, atoms = _simulate(env_key, period, cumw, cum_probs, dirs, start, int(horizon),
                             np.uint64(key), int(counter0))
    return WalkPath(start, steps, atoms)


@dataclass(frozen=True)
class Occupation:
    """Transition counts ``counts[atom, dir]`` and positions at checkpoints."""

    checkpoints: np.ndarray
    counts: np.ndarray
    positions: np.ndarray

    def site_sum(self, f_atoms: np.ndarray) -> np.ndarray:
        """``sum_i f(zeta_i)`` up to each checkpoint for a site function given per atom."""
        return self.counts.sum(axis=2) @ np.asarray(f_atoms, dtype=np.float64)

    def step_sum(self, g: np.ndarray) -> np.ndarray:
        """``sum_i g(zeta_i, dX_i)`` for a table ``g[atom, dir]``."""
        return np.einsum("cak,ak->c", self.counts, np.asarray(g, dtype=np.float64))


def occupation(view: PerturbedView, start, horizon: int, key, checkpoints=None) -> Occupation:
    env_key, period, cumw, cum_probs, dirs = view.kernel_args()
    cps = np.asarray([horizon] if checkpoints is None else checkpoints, dtype=np.int64)
    snaps, pos = _occupation(env_key, period, cumw, cum_probs, dirs,
                             np.asarray(start, dtype=np.int64), int(horizon), np.uint64(key), 0, cps)
    return Occupation(cps, snaps, pos)


def passage(view: PerturbedView, start, up: int, down: int, horizon: int, key, half: int = 0):
    """First exit of the band ``(-down, up)`` in e1-offset; see ``_passage``."""
    env_key, period, cumw, cum_probs, dirs = view.kernel_args()
    return _passage(env_key, period, cumw, cum_probs, dirs, np.asarray(start, dtype=np.int64),
                    int(horizon), np.uint64(key), 0, int(up), int(down), int(half or up // 2))


# ---------------------------------------------------------------------------
# hitting times
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HittingReport:
    times: dict
    tilde: dict

    def __getitem__(self, n):
        return self.times[n]


def hitting_times(path: WalkPath, clock: LevelClock, levels: Iterable[float]) -> HittingReport:
    """First index ``t`` with ``(X_t - X_0).e1 = n / lambda1``; ``None`` if unreached."""
    off = path.e1 - path.e1[0]
    lo, hi = int(off.min()), int(off.max())
    # first index at which each offset value is attained
    first = np.full(hi - lo + 1, -1, dtype=np.int64)
    vals = off - lo
    seen_idx = np.unique(vals, return_index=True)
    first[seen_idx[0]] = seen_idx[1]
    times = {}
    for n in levels:
        o = clock.offset(n)
        times[n] = int(first[o - lo]) if lo <= o <= hi else None
    tilde = {}
    for n in levels:
        if n <= 0:
            continue
        up = times[n]
        o = clock.offset(-n)
        down = int(first[o - lo]) if lo <= o <= hi else None
        cands = [t for t in (up, down) if t is not None]
        tilde[n] = min(cands) if cands else None
    return HittingReport(times, tilde)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------


def a_obs(zeta: SitePair, e) -> float:
    j = e if isinstance(e, (int, np.integer)) else direction_index(e)
    return float(zeta.xi.xi[j] / zeta.omega.probs[j])


def h_obs(zeta: SitePair) -> float:
    return float(np.sum(zeta.xi.xi ** 2 / zeta.omega.probs))


def a_table(dist) -> np.ndarray:
    """``a(atom, dir) = xi/omega`` for every atom."""
    return dist.xi / dist.omega


def h_table(dist) -> np.ndarray:
    return np.sum(dist.xi ** 2 / dist.omega, axis=1)


def empirical_speed(path: WalkPath) -> np.ndarray:
    if len(path) == 0:
        raise ValueError("empty path has no speed")
    return (path.positions[-1] - path.positions[0]) / len(path)


def particle_view(path: WalkPath, fld: EnvironmentField, radius: int) -> Iterator[np.ndarray]:
    """Yield atom indices on the box of ``radius`` around ``X_n`` (the shifted field)."""
    d = path.d
    grid = np.stack(np.meshgrid(*[np.arange(-radius, radius + 1)] * d, indexing="ij"), -1)
    grid = grid.reshape(-1, d)
    shape = (2 * radius + 1,) * d
    for x in path.positions:
        yield fld.atom_index(grid + x).reshape(shape)


@dataclass
class SpreadReport:
    lam: float
    replicas: int
    unreached_half: int
    unreached_n: int
    half_scaled: np.ndarray
    level_scaled: np.ndarray
    n_level: int

    def frac_below(self, c: float) -> float:
        """Fraction of all replicas with ``|X_{T_0.5}| * lambda < c`` (unreached count as failures)."""
        return float(np.sum(self.half_scaled < c) / self.replicas)

    def quantiles(self, qs=(0.5, 0.9, 0.99)) -> dict:
        return {
            "half": np.quantile(self.half_scaled, qs).tolist() if self.half_scaled.size else None,
            "level": np.quantile(self.level_scaled, qs).tolist() if self.level_scaled.size else None,
        }


def lateral_spread_check(view: PerturbedView, clock: LevelClock, replicas: int, seed: int,
                         n_level: int = 1, horizon: int | None = None) -> SpreadReport:
    """Quantiles of ``|X_{T_0.5}| lambda`` and ``|X_{T_n} - (n/lambda1) e1| lambda1 / n``.

    ``|.|`` is the Euclidean norm of the displacement from the start.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    up = clock.offset(n_level)
    horizon = horizon or int(200 * up * clock.gap)
    start = np.zeros(view.d, dtype=np.int64)
    half, lev = [], []
    miss_half = miss_n = 0
    target = np.zeros(view.d)
    target[0] = up
    for r in range(replicas):
        t, x, hit, th, xh = passage(view, start, up, 0, horizon, walker_key(seed, "spread", r),
                                   half=clock.half)
        if th >= 0:
            half.append(np.linalg.norm(xh) * view.lam)
        else:
            miss_half += 1
        if hit == 1:
            lev.append(np.linalg.norm(x - target) * clock.lambda1 / n_level)
        else:
            miss_n += 1
    return SpreadReport(view.lam, replicas, miss_half, miss_n, np.asarray(half), np.asarray(lev), n_level)
