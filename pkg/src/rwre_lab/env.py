"""Local environments, perturbation cells and the iid environment field.

Directions are indexed ``0..2d-1`` as ``+e1, -e1, +e2, -e2, ...``; every
per-direction quantity is a length-``2d`` array in that order.

All four distribution kinds reduce to a finite table of atoms
``(omega_a, xi_a)`` with weights ``w_a``; the field draws one atom per site
from a keyed hash of the site coordinates, so the site at ``x`` is a pure
function of ``(master_seed, x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numba as nb
import numpy as np

from .rng import derive_key, point_uniform

TOL = 1e-12


class EnvironmentError_(ValueError):
    """Invalid local environment, perturbation or distribution."""


class InvalidPerturbation(ValueError):
    """Perturbation scale outside ``[0, kappa/2)``."""


def unit_vectors(d: int) -> np.ndarray:
    """Directions ``+e1, -e1, ..., +ed, -ed`` as an int64 array of shape (2d, d)."""
    dirs = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        dirs[2 * i, i] = 1
        dirs[2 * i + 1, i] = -1
    return dirs


def direction_index(e: Sequence[int]) -> int:
    e = np.asarray(e, dtype=np.int64)
    (axis,) = np.nonzero(e)
    if axis.size != 1 or abs(e[axis[0]]) != 1:
        raise ValueError(f"{e!r} is not a unit vector")
    return 2 * int(axis[0]) + (0 if e[axis[0]] > 0 else 1)


def local_drift(f) -> np.ndarray:
    """Sum over directions of ``f(e) * e``; accepts arrays of shape (..., 2d)."""
    f = np.asarray(f, dtype=np.float64)
    d = f.shape[-1] // 2
    return f @ unit_vectors(d).astype(np.float64)


@dataclass(frozen=True)
class LocalEnv:
    probs: np.ndarray
    kappa: float

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size % 2:
            raise EnvironmentError_("probs must have 2d entries")
        if not 0 < self.kappa <= 1 / p.size + TOL:
            raise EnvironmentError_(f"kappa={self.kappa} outside (0, 1/(2d)]")
        if abs(p.sum() - 1) > TOL:
            raise EnvironmentError_(f"probs sum to {p.sum()!r}")
        if p.min() < self.kappa - TOL:
            raise EnvironmentError_(f"entry {p.min()} below kappa={self.kappa}")

    @property
    def d(self) -> int:
        return self.probs.size // 2


@dataclass(frozen=True)
class PerturbCell:
    xi: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.xi, dtype=np.float64)
        object.__setattr__(self, "xi", x)
        if abs(x.sum()) > TOL:
            raise EnvironmentError_(f"xi sums to {x.sum()!r}")
        if np.abs(x).max(initial=0) > 1 + TOL:
            raise EnvironmentError_("|xi| must be <= 1")


@dataclass(frozen=True)
class SitePair:
    omega: LocalEnv
    xi: PerturbCell

    def __post_init__(self):
        if self.omega.probs.shape != self.xi.xi.shape:
            raise EnvironmentError_("omega and xi dimension mismatch")

    def __eq__(self, other):
        return (
            isinstance(other, SitePair)
            and np.array_equal(self.omega.probs, other.omega.probs)
            and np.array_equal(self.xi.xi, other.xi.xi)
        )

    __hash__ = None


def check_lambda(lam: float, kappa: float) -> None:
    if not (0 <= lam < kappa / 2):
        raise InvalidPerturbation(f"lambda={lam} outside [0, kappa/2) with kappa={kappa}")


def perturb(zeta: SitePair, lam: float) -> LocalEnv:
    """``omega + lam * xi``, valid for ``lam`` in ``[0, kappa/2)``; floor becomes kappa/2."""
    check_lambda(lam, zeta.omega.kappa)
    return LocalEnv(zeta.omega.probs + lam * zeta.xi.xi, zeta.omega.kappa / 2)


def _as_rows(a, d=None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if d is not None and a.shape[1] != 2 * d:
        raise EnvironmentError_(f"expected rows of length {2 * d}")
    return a


@dataclass(frozen=True)
class EnvDistribution:
    """Finite-support law of the site pair ``(omega_x, xi_x)``.

    ``omega`` and ``xi`` are (A, 2d) atom tables and ``weights`` their
    probabilities. ``kind`` records how the table was built; ``ell`` is the
    perturbation direction for the proportional kind.
    """

    kind: str
    d: int
    kappa: float
    omega: np.ndarray
    xi: np.ndarray
    weights: np.ndarray
    ell: np.ndarray | None = None
    balanced: bool = False
    spec: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        om = _as_rows(self.omega, self.d)
        xi = _as_rows(self.xi, self.d)
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "weights", w)
        if om.shape != xi.shape or om.shape[0] != w.size:
            raise EnvironmentError_("atom table shapes disagree")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise EnvironmentError_("weights must be nonnegative and sum to 1")
        for a in range(w.size):
            SitePair(LocalEnv(om[a], self.kappa), PerturbCell(xi[a]))
        if self.balanced and np.abs(local_drift(om)).max() > 1e-12:
            raise EnvironmentError_("balanced flag set but some atom has nonzero drift")

    # constructors -----------------------------------------------------------
    @classmethod
    def homogeneous(cls, omega, xi=None, kappa=None) -> "EnvDistribution":
        omega = np.asarray(omega, dtype=np.float64)
        d = omega.size // 2
        xi = np.zeros_like(omega) if xi is None else np.asarray(xi, dtype=np.float64)
        kappa = float(omega.min()) if kappa is None else kappa
        spec = {"kind": "homogeneous", "d": d, "kappa": kappa,
                "omega": omega.tolist(), "xi": xi.tolist()}
        return cls("homogeneous", d, kappa, omega[None], xi[None], np.ones(1),
                   balanced=_is_balanced(omega[None]), spec=spec)

    @classmethod
    def finite_support(cls, omegas, xis, weights, kappa=None) -> "EnvDistribution":
        om = _as_rows(omegas)
        xi = _as_rows(xis)
        d = om.shape[1] // 2
        kappa = float(om.min()) if kappa is None else kappa
        spec = {"kind": "finite-support", "d": d, "kappa": kappa, "omega": om.tolist(),
                "xi": xi.tolist(), "weights": list(map(float, weights))}
        return cls("finite-support", d, kappa, om, xi, weights,
                   balanced=_is_balanced(om), spec=spec)

    @classmethod
    def proportional(cls, omegas, weights, ell, kappa=None) -> "EnvDistribution":
        """xi(x, e) = omega(x, e) * (e . ell)."""
        om = _as_rows(omegas)
        d = om.shape[1] // 2
        ell = np.asarray(ell, dtype=np.float64)
        if ell.shape != (d,) or abs(np.linalg.norm(ell) - 1) > 1e-12:
            raise EnvironmentError_("ell must be a unit vector in R^d")
        if np.abs(local_drift(om) @ ell).max() > 1e-12:
            raise EnvironmentError_("proportional kind needs d(omega).ell = 0 for every atom")
        xi = om * (unit_vectors(d) @ ell)[None, :]
        kappa = float(om.min()) if kappa is None else kappa
        spec = {"kind": "proportional", "d": d, "kappa": kappa, "omega": om.tolist(),
                "weights": list(map(float, weights)), "ell": ell.tolist()}
        return cls("proportional", d, kappa, om, xi, weights, ell=ell,
                   balanced=_is_balanced(om), spec=spec)

    @classmethod
    def independent(cls, omegas, omega_weights, xis, xi_weights, kappa=None) -> "EnvDistribution":
        """omega and xi drawn independently; stored as the product table."""
        om = _as_rows(omegas)
        xi = _as_rows(xis)
        wo = np.asarray(omega_weights, dtype=np.float64)
        wx = np.asarray(xi_weights, dtype=np.float64)
        d = om.shape[1] // 2
        kappa = float(om.min()) if kappa is None else kappa
        po = np.repeat(om, len(wx), axis=0)
        px = np.tile(xi, (len(wo), 1))
        w = np.outer(wo, wx).ravel()
        spec = {"kind": "independent", "d": d, "kappa": kappa, "omega": om.tolist(),
                "omega_weights": wo.tolist(), "xi": xi.tolist(), "xi_weights": wx.tolist()}
        return cls("independent", d, kappa, po, px, w, balanced=_is_balanced(om), spec=spec)

    @classmethod
    def from_dict(cls, spec: dict) -> "EnvDistribution":
        kind = spec["kind"]
        kappa = spec.get("kappa")
        if kind == "homogeneous":
            return cls.homogeneous(spec["omega"], spec.get("xi"), kappa)
        if kind == "finite-support":
            return cls.finite_support(spec["omega"], spec["xi"], spec["weights"], kappa)
        if kind == "proportional":
            return cls.proportional(spec["omega"], spec["weights"], spec["ell"], kappa)
        if kind == "independent":
            return cls.independent(spec["omega"], spec["omega_weights"], spec["xi"],
                                   spec["xi_weights"], kappa)
        raise EnvironmentError_(f"unknown distribution kind {kind!r}")

    def to_dict(self) -> dict:
        return dict(self.spec)

    # derived quantities ------------------------------------------------------
    @property
    def n_atoms(self) -> int:
        return self.weights.size

    def atom(self, a: int) -> SitePair:
        return SitePair(LocalEnv(self.omega[a], self.kappa), PerturbCell(self.xi[a]))

    def perturbed(self, lam: float) -> np.ndarray:
        check_lambda(lam, self.kappa)
        return self.omega + lam * self.xi

    def mean_drift(self, which: str = "xi") -> np.ndarray:
        table = self.xi if which == "xi" else self.omega
        return self.weights @ local_drift(table)


def _is_balanced(om: np.ndarray) -> bool:
    return bool(np.abs(local_drift(om)).max() <= 1e-12)


def simple_walk(d: int = 2) -> np.ndarray:
    return np.full(2 * d, 1.0 / (2 * d))


def balanced_atom(weights_per_axis) -> np.ndarray:
    """Balanced local environment putting mass ``w_i/2`` on each of ``+-e_i``."""
    w = np.asarray(weights_per_axis, dtype=np.float64)
    w = w / w.sum()
    return np.repeat(w / 2, 2)


def random_balanced_atoms(rng: np.random.Generator, d: int, n_atoms: int, kappa: float) -> np.ndarray:
    """Random balanced atoms with every entry >= kappa."""
    free = 1 - 2 * d * kappa
    out = np.empty((n_atoms, 2 * d))
    for a in range(n_atoms):
        share = rng.dirichlet(np.ones(d)) * free
        out[a] = np.repeat(kappa + share / 2, 2)
    return out


# ---------------------------------------------------------------------------
# field realization
# ---------------------------------------------------------------------------


@nb.njit(cache=True, inline="always")
def site_atom(key, x, period, cumw):
    u = point_uniform(key, x, period)
    n = cumw.shape[0]
    for a in range(n - 1):
        if u < cumw[a]:
            return a
    return n - 1


@nb.njit(cache=True)
def site_atoms(key, points, period, cumw):
    out = np.empty(points.shape[0], dtype=np.int64)
    for i in range(points.shape[0]):
        out[i] = site_atom(key, points[i], period, cumw)
    return out


@dataclass(frozen=True)
class EnvironmentField:
    """One realization of the iid field, queried lazily by coordinates.

    ``lateral_period`` (if set) makes the field periodic in coordinates
    2..d, which turns level-band stopping problems into exact finite systems.
    The optional cache only memoizes the pure site function.
    """

    dist: EnvDistribution
    master_seed: int
    lateral_period: int | None = None
    cache: bool = False
    _memo: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.lateral_period is not None and self.lateral_period < 1:
            raise ValueError("lateral_period must be >= 1")

    @cached_property
    def key(self) -> np.uint64:
        return derive_key(self.master_seed, "env")

    @cached_property
    def cumw(self) -> np.ndarray:
        c = np.cumsum(self.dist.weights)
        c[-1] = 1.0 + 1e-9
        return c

    @property
    def period(self) -> int:
        return 0 if self.lateral_period is None else int(self.lateral_period)

    @property
    def d(self) -> int:
        return self.dist.d

    def atom_index(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.int64)))
        if pts.shape[1] != self.d:
            raise ValueError(f"points must have {self.d} coordinates")
        return site_atoms(self.key, pts, self.period, self.cumw)

    def site(self, x) -> SitePair:
        x = tuple(int(c) for c in x)
        if self.cache and x in self._memo:
            return self._memo[x]
        s = self.dist.atom(int(self.atom_index([x])[0]))
        if self.cache:
            self._memo[x] = s
        return s

    def shifted(self, x):
        """Shift theta^x: a site accessor ``y -> site(x + y)``."""
        x = np.asarray(x, dtype=np.int64)
        return lambda y: self.site(x + np.asarray(y, dtype=np.int64))


@dataclass(frozen=True)
class PerturbedView:
    """``omega^lambda = omega + lambda xi`` over a field."""

    field: EnvironmentField
    lam: float

    def __post_init__(self):
        check_lambda(self.lam, self.field.dist.kappa)
        p = self.probs
        if p.min() <= self.field.dist.kappa / 2 - 1e-15 or np.abs(p.sum(axis=1) - 1).max() > 1e-12:
            raise InvalidPerturbation("perturbed rows leave the elliptic simplex")

    @cached_property
    def probs(self) -> np.ndarray:
        return self.field.dist.perturbed(self.lam)

    @cached_property
    def cum_probs(self) -> np.ndarray:
        c = np.cumsum(self.probs, axis=1)
        c[:, -1] = 1.0 + 1e-9
        return c

    @property
    def dist(self) -> EnvDistribution:
        return self.field.dist

    @property
    def d(self) -> int:
        return self.field.d

    def local(self, x) -> LocalEnv:
        return perturb(self.field.site(x), self.lam)

    def probs_at(self, points) -> np.ndarray:
        return self.probs[self.field.atom_index(points)]

    def kernel_args(self):
        """Arguments consumed by the numba kernels (key, period, cumw, cum_probs, dirs)."""
        f = self.field
        return f.key, f.period, f.cumw, np.ascontiguousarray(self.cum_probs), unit_vectors(self.d)
