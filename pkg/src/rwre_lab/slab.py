"""Exact absorbing-chain solves on finite domains.

A domain is a finite interior set with an absorbing outer boundary. The walk
restricted to it gives ``A = I - Q`` (interior to interior) and ``B``
(interior to boundary); exit laws are rows of ``A^{-1} B`` and Green functions
rows of ``A^{-1}``. Level bands use a lateral torus so that the band is finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .env import PerturbedView, unit_vectors
from .rng import uniform
from .walk import WalkPath

RESIDUAL_TOL = 1e-10
DENSE_MAX = 1000


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    """Interior points, boundary points and the neighbour table.

    ``nbr[s, j]`` is the interior index reached from ``s`` in direction ``j``,
    or ``-1 - k`` when the move lands on boundary point ``k``.
    """

    interior: np.ndarray
    boundary: np.ndarray
    nbr: np.ndarray

    @property
    def n(self) -> int:
        return self.interior.shape[0]

    @property
    def d(self) -> int:
        return self.interior.shape[1]

    @classmethod
    def from_points(cls, interior) -> "Geometry":
        """Domain from an explicit interior point set; boundary = outer neighbours."""
        interior = np.asarray(interior, dtype=np.int64)
        d = interior.shape[1]
        dirs = unit_vectors(d)
        index = {tuple(p): i for i, p in enumerate(interior)}
        bindex: dict = {}
        nbr = np.empty((interior.shape[0], 2 * d), dtype=np.int64)
        for i, p in enumerate(interior):
            for j in range(2 * d):
                q = tuple(p + dirs[j])
                if q in index:
                    nbr[i, j] = index[q]
                else:
                    k = bindex.setdefault(q, len(bindex))
                    nbr[i, j] = -1 - k
        boundary = np.array(list(bindex), dtype=np.int64).reshape(-1, d)
        return cls(interior, boundary, nbr)

    def index_of(self, x) -> int:
        hit = np.nonzero(np.all(self.interior == np.asarray(x), axis=1))[0]
        if hit.size == 0:
            raise KeyError(f"{x!r} is not interior")
        return int(hit[0])


def box(lo, hi) -> Geometry:
    """Interior ``prod [lo_i, hi_i]`` (inclusive)."""
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo))
    return Geometry.from_points(pts)


def ball(R: float, d: int = 2, center=None) -> Geometry:
    """Interior ``{z : |z| < R}``."""
    r = int(math.ceil(R))
    axes = [np.arange(-r, r + 1)] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    pts = pts[np.einsum("ij,ij->i", pts, pts) < R * R]
    if center is not None:
        pts = pts + np.asarray(center, dtype=np.int64)
    return Geometry.from_points(pts)


@dataclass(frozen=True)
class Slab:
    """Band ``a < x.e1 < b`` with lateral coordinates on a torus of period ``L``.

    Interior index of ``x`` is ``(x1 - a - 1) * L^(d-1) + lateral``, with the
    lateral index in row-major order over ``(x2 - o2) mod L, ...``. Boundary
    points are the bottom layer ``x1 = a`` followed by the top layer ``x1 = b``.
    """

    d: int
    a: int
    b: int
    L: int
    lateral_origin: tuple = ()

    def __post_init__(self):
        if self.b - self.a < 2:
            raise ValueError("slab needs b - a >= 2")
        if self.L < 3:
            raise ValueError("lateral period must be >= 3")
        if not self.lateral_origin:
            object.__setattr__(self, "lateral_origin", (0,) * (self.d - 1))

    @property
    def n_lat(self) -> int:
        return self.L ** (self.d - 1)

    @property
    def n(self) -> int:
        return (self.b - self.a - 1) * self.n_lat

    @cached_property
    def lateral_grid(self) -> np.ndarray:
        if self.d == 1:
            return np.zeros((1, 0), dtype=np.int64)
        axes = [np.arange(self.L)] * (self.d - 1)
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.d - 1)

    def lateral_index(self, lat) -> np.ndarray:
        lat = np.atleast_2d(np.asarray(lat, dtype=np.int64)) - np.asarray(self.lateral_origin)
        lat = np.mod(lat, self.L)
        idx = np.zeros(lat.shape[0], dtype=np.int64)
        for i in range(self.d - 1):
            idx = idx * self.L + lat[:, i]
        return idx

    def index(self, x) -> int:
        x = np.asarray(x, dtype=np.int64)
        if not self.a < x[0] < self.b:
            raise KeyError(f"{x!r} is not interior")
        return int((x[0] - self.a - 1) * self.n_lat + self.lateral_index(x[1:])[0])

    def top_index(self, x) -> int:
        """Boundary index of a top-layer point."""
        return int(self.n_lat + self.lateral_index(np.asarray(x)[1:])[0])

    @cached_property
    def geometry(self) -> Geometry:
        d, L, n_lat = self.d, self.L, self.n_lat
        layers = self.b - self.a - 1
        lat = self.lateral_grid + np.asarray(self.lateral_origin, dtype=np.int64)
        x1 = np.repeat(np.arange(self.a + 1, self.b), n_lat)
        interior = np.column_stack([x1, np.tile(lat, (layers, 1))]).astype(np.int64)
        boundary = np.column_stack([
            np.repeat([self.a, self.b], n_lat), np.tile(lat, (2, 1))]).astype(np.int64)
        s = np.arange(self.n)
        layer, li = np.divmod(s, n_lat)
        nbr = np.empty((self.n, 2 * d), dtype=np.int64)
        # e1 moves
        up = layer + 1
        nbr[:, 0] = np.where(up == layers, -1 - (n_lat + li), up * n_lat + li)
        dn = layer - 1
        nbr[:, 1] = np.where(dn < 0, -1 - li, dn * n_lat + li)
        # lateral moves on the torus
        for i in range(1, d):
            stride = L ** (d - 1 - i)
            digit = (li // stride) % L
            for sign, col in ((1, 2 * i), (-1, 2 * i + 1)):
                nd = (digit + sign) % L
                nbr[:, col] = layer * n_lat + li + (nd - digit) * stride
        return Geometry(interior, boundary, nbr)


# ---------------------------------------------------------------------------
# linear systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HittingLaw:
    start: np.ndarray
    points: np.ndarray
    mass: np.ndarray
    escape: float = 0.0

    def restrict(self, mask) -> "HittingLaw":
        """Condition on exiting through the boundary points selected by ``mask``."""
        m = np.where(mask, self.mass, 0.0)
        tot = m.sum()
        if tot <= 0:
            raise ValueError("conditioning event has zero mass")
        return HittingLaw(self.start, self.points, m / tot)


@dataclass(frozen=True)
class GreenTable:
    start: np.ndarray
    points: np.ndarray
    g: np.ndarray


@dataclass
class AbsorbingSystem:
    """``A = I - Q`` and ``B`` for a geometry and per-interior-site transition rows."""

    geom: Geometry
    probs: np.ndarray
    method: str = "auto"
    _lu: object = field(default=None, repr=False)
    _luT: object = field(default=None, repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != self.geom.nbr.shape:
            raise ValueError("probs must be (n_interior, 2d)")
        if np.abs(probs.sum(axis=1) - 1).max() > 1e-12 or probs.min() <= 0:
            raise SolverError("rows must be strictly positive and stochastic")
        self.probs = probs
        n = self.geom.n
        nb_ = self.geom.nbr
        rows = np.repeat(np.arange(n), nb_.shape[1])
        cols = nb_.ravel()
        vals = probs.ravel()
        inner = cols >= 0
        Q = sp.csr_matrix((vals[inner], (rows[inner], cols[inner])), shape=(n, n))
        self.A = (sp.identity(n, format="csr") - Q).tocsc()
        self.B = sp.csr_matrix((vals[~inner], (rows[~inner], -1 - cols[~inner])),
                               shape=(n, self.geom.boundary.shape[0]))
        if self.method == "auto":
            self.method = "dense" if n <= DENSE_MAX else "sparse"
        if self.method not in ("dense", "sparse", "iterative"):
            raise ValueError(f"unknown method {self.method!r}")

    @classmethod
    def from_view(cls, geom: Geometry, view: PerturbedView, method: str = "auto") -> "AbsorbingSystem":
        return cls(geom, view.probs_at(geom.interior), method)

    @property
    def n(self) -> int:
        return self.geom.n

    def _solve(self, rhs: np.ndarray, transpose: bool) -> np.ndarray:
        A = self.A.T.tocsc() if transpose else self.A
        if self.method == "dense":
            import scipy.linalg as sla
            key = "_luT" if transpose else "_lu"
            if getattr(self, key) is None:
                setattr(self, key, sla.lu_factor(A.toarray()))
            x = sla.lu_solve(getattr(self, key), rhs)
        elif self.method == "sparse":
            if self._lu is None:
                self._lu = spla.splu(self.A)
            x = self._lu.solve(rhs, trans="T" if transpose else "N")
        else:
            x = _iterative(A, rhs)
        return x

    def release(self) -> None:
        """Drop cached factorizations."""
        self._lu = self._luT = None

    def solve(self, rhs, transpose: bool = False) -> np.ndarray:
        """Solve ``A x = rhs`` (or ``A^T x = rhs``) with a residual check."""
        rhs = np.asarray(rhs, dtype=np.float64)
        x = self._solve(rhs, transpose)
        A = self.A.T if transpose else self.A
        res = np.abs(A @ x - rhs).max() / max(1.0, np.abs(rhs).max())
        if not np.isfinite(res) or res > RESIDUAL_TOL:
            raise SolverError(f"residual {res:.3g} exceeds {RESIDUAL_TOL}")
        return x

    def green_row(self, s: int) -> np.ndarray:
        e = np.zeros(self.n)
        e[s] = 1.0
        return self.solve(e, transpose=True)

    def exit_row(self, s: int) -> np.ndarray:
        return self.B.T @ self.green_row(s)

    def hitting_columns(self, cols) -> np.ndarray:
        """``A^{-1} B[:, cols]``: exit probability at each boundary column from every interior state."""
        rhs = self.B[:, cols].toarray()
        return self.solve(rhs)

    def hitting_matrix(self) -> np.ndarray:
        return self.hitting_columns(np.arange(self.B.shape[1]))


def _iterative(A, rhs):
    """GMRES with a Jacobi preconditioner, column by column."""
    diag = A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
    cols = rhs if rhs.ndim == 2 else rhs[:, None]
    out = np.empty_like(cols)
    for k in range(cols.shape[1]):
        x, info = spla.gmres(A, cols[:, k], M=M, rtol=1e-13, atol=0.0, restart=200, maxiter=2000)
        if info != 0:
            raise SolverError(f"gmres did not converge (info={info})")
        out[:, k] = x
    return out if rhs.ndim == 2 else out[:, 0]


def slab_system(slab: Slab, view: PerturbedView, method: str = "auto") -> AbsorbingSystem:
    return AbsorbingSystem.from_view(slab.geometry, view, method)


def exit_law(slab: Slab, view: PerturbedView, start, system: AbsorbingSystem | None = None) -> HittingLaw:
    system = system or slab_system(slab, view)
    s = slab.index(start)
    mass = system.exit_row(s)
    return HittingLaw(np.asarray(start), slab.geometry.boundary, mass)


def green(slab: Slab, view: PerturbedView, start, system: AbsorbingSystem | None = None) -> GreenTable:
    system = system or slab_system(slab, view)
    s = slab.index(start)
    return GreenTable(np.asarray(start), slab.geometry.interior, system.green_row(s))


# ---------------------------------------------------------------------------
# Doob transform
# ---------------------------------------------------------------------------


@nb.njit(cache=True, nogil=True)
def h_transform_walk(nbr, probs, h, target, s0, key, counter0, max_steps):
    """Walk from interior state ``s0`` with rows ``probs[s, j] h(next) / h(s)``.

    ``h`` is the exit probability at boundary point ``target``; the boundary
    value of ``h`` is 1 at ``target`` and 0 elsewhere. Returns the direction
    indices taken and the number of uniforms consumed.
    """
    k = nbr.shape[1]
    steps = np.empty(max_steps, dtype=np.int8)
    w = np.empty(k)
    s = s0
    n = 0
    while True:
        if n >= max_steps:
            return steps[:n], -1
        tot = 0.0
        for j in range(k):
            t = nbr[s, j]
            if t >= 0:
                hv = h[t]
            elif -1 - t == target:
                hv = 1.0
            else:
                hv = 0.0
            w[j] = probs[s, j] * hv
            tot += w[j]
        u = uniform(key, counter0 + n) * tot
        j = 0
        acc = w[0]
        while u >= acc and j < k - 1:
            j += 1
            acc += w[j]
        # never pick a zero-weight direction through round-off
        while w[j] == 0.0:
            j -= 1
        steps[n] = j
        n += 1
        t = nbr[s, j]
        if t < 0:
            return steps[:n].copy(), n
        s = t


def conditioned_sampler(slab: Slab, view: PerturbedView, start, target, key, n_samples: int = 1,
                        system: AbsorbingSystem | None = None, max_steps: int = 10_000_000):
    """Paths from ``start`` conditioned to exit the slab at boundary point ``target``."""
    system = system or slab_system(slab, view)
    geom = slab.geometry
    hit = np.nonzero(np.all(geom.boundary == np.asarray(target), axis=1))[0]
    if hit.size == 0:
        raise ValueError(f"{target!r} is not a boundary point")
    k = int(hit[0])
    h = system.hitting_columns([k])[:, 0]
    s0 = slab.index(start)
    if h[s0] <= 0:
        raise ValueError("target has zero exit mass from start")
    out = []
    counter = 0
    for _ in range(n_samples):
        steps, used = h_transform_walk(geom.nbr, system.probs, h, k, s0, np.uint64(key), counter, max_steps)
        if used < 0:
            raise RuntimeError("conditioned walk exceeded max_steps")
        counter += used
        out.append(WalkPath(np.asarray(start), steps))
    return out if n_samples != 1 else out[0]


# ---------------------------------------------------------------------------
# Harnack ratio
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HarmonicField:
    geom: Geometry
    u: np.ndarray
    boundary_values: np.ndarray


def harmonic_extension(geom: Geometry, probs: np.ndarray, boundary_values) -> HarmonicField:
    """Solve ``sum_e p(x,e) u(x+e) = u(x)`` inside with Dirichlet data on the boundary."""
    g = np.asarray(boundary_values, dtype=np.float64)
    if g.shape != (geom.boundary.shape[0],):
        raise ValueError("one boundary value per boundary point")
    if np.any(g < 0) or not np.any(g > 0):
        raise ValueError("boundary data must be nonnegative and not identically zero")
    system = AbsorbingSystem(geom, probs)
    u = system.solve(system.B @ g)
    return HarmonicField(geom, u, g)


def harnack_ratio(field_: HarmonicField, R: float, sigma: float) -> float:
    """``max / min`` of ``u`` over the closed ball ``|z| <= sigma R``."""
    if R * (1 - sigma) <= 1:
        raise ValueError("need R (1 - sigma) > 1")
    pts = field_.geom.interior
    inner = np.einsum("ij,ij->i", pts, pts) <= (sigma * R) ** 2 + 1e-9
    vals = field_.u[inner]
    return float(vals.max() / vals.min())


def angular_data(points: np.ndarray, direction: np.ndarray, concentration: float) -> np.ndarray:
    """Scale-free boundary data ``exp(k (cos(angle to direction) - 1))``."""
    nrm = np.linalg.norm(points, axis=1)
    cos = points @ direction / np.where(nrm == 0, 1, nrm)
    return np.exp(concentration * (cos - 1))


@dataclass(frozen=True)
class HarnackBatch:
    R: float
    sigma: float
    lam: float
    ratios: np.ndarray

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())


def harnack_batch(R: int, sigma: float, lam_times_R: float, count: int, seed: int, d: int = 2,
                  kappa: float = 0.1, n_atoms: int = 4, max_concentration: float = 4.0) -> HarnackBatch:
    """Max Harnack ratio over random balanced environments and random angular data.

    Each instance draws a random balanced atom table, an e1-proportional
    perturbation with ``lambda = lam_times_R / R`` (so the drift bound times
    ``R`` is fixed), and boundary data with random direction and concentration.
    Instance ``i`` uses the same random choices at every ``R``.
    """
    from .env import EnvDistribution, EnvironmentField, random_balanced_atoms
    from .rng import generator

    lam = lam_times_R / R
    geom = ball(R, d)
    ratios = np.empty(count)
    for i in range(count):
        rng = generator(seed, "harnack", i)
        om = random_balanced_atoms(rng, d, n_atoms, kappa)
        ell = np.zeros(d)
        ell[0] = 1.0
        dist = EnvDistribution.proportional(om, np.full(n_atoms, 1.0 / n_atoms), ell, kappa=kappa)
        view = PerturbedView(EnvironmentField(dist, int(rng.integers(2**62))), lam)
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        k = rng.uniform(0, max_concentration)
        data = angular_data(geom.boundary.astype(np.float64), direction, k)
        hf = harmonic_extension(geom, view.probs_at(geom.interior), data)
        ratios[i] = harnack_ratio(hf, R, sigma)
    return HarnackBatch(R, sigma, lam, ratios)
