"""Keyed, counter-based random streams.

Every random quantity in the lab is a pure function of a 64-bit key and an
integer counter, so results never depend on the order in which work is
scheduled. Keys are derived from the master seed through
``numpy.random.SeedSequence`` spawn keys; the in-kernel generator is
SplitMix64 evaluated at an explicit counter (the stream position).
"""
from __future__ import annotations

import zlib

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0

# stream roles: environment sampling, walk steps, coins and exit draws never share a key
ROLES = {
    "env": 0,
    "walk": 1,
    "coin": 2,
    "exit": 3,
    "bcoin": 4,
    "data": 5,
    "boot": 6,
    "probe": 7,
}


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, inline="always")
def uniform(key, counter):
    """U(0,1) draw number ``counter`` of the stream ``key`` (SplitMix64)."""
    z = key + (np.uint64(counter) + np.uint64(1)) * GOLDEN
    return np.float64(mix64(z) >> np.uint64(11)) * _INV_2_53


@nb.njit(cache=True)
def uniform_array(key, start, n):
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = uniform(key, start + i)
    return out


@nb.njit(cache=True, inline="always")
def hash_point(key, x, period):
    """Hash a lattice point; lateral coordinates are reduced mod ``period`` when > 0."""
    h = key
    for i in range(x.shape[0]):
        c = x[i]
        if i > 0 and period > 0:
            c = c % period
        h = mix64(h ^ mix64(np.uint64(c) + np.uint64(i + 1) * GOLDEN))
    return h


@nb.njit(cache=True, inline="always")
def point_uniform(key, x, period):
    return np.float64(hash_point(key, x, period) >> np.uint64(11)) * _INV_2_53


def _name_key(part) -> int:
    if isinstance(part, str):
        if part in ROLES:
            return ROLES[part]
        return zlib.crc32(part.encode()) + 1000
    return int(part)


def derive_key(master_seed: int, *path) -> np.uint64:
    """64-bit stream key for the hierarchy ``master_seed -> path``.

    ``path`` elements are ints or names (roles map to fixed ids, other strings
    are hashed with CRC32 so they are stable across processes).
    """
    spawn = tuple(_name_key(p) for p in path)
    ss = np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn)
    return ss.generate_state(1, dtype=np.uint64)[0]


def generator(master_seed: int, *path) -> np.random.Generator:
    """numpy Generator for Python-side draws keyed the same way."""
    spawn = tuple(_name_key(p) for p in path)
    ss = np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn)
    return np.random.Generator(np.random.PCG64(ss))
