"""Ordered parallel map over replicas.

Every replica draws from its own keyed streams, so the result of ``pmap``
does not depend on the number of threads; results are always returned in
input order and reduced by the caller in that order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

_threads = None


def threads() -> int:
    if _threads is not None:
        return _threads
    try:
        return max(1, int(os.environ.get("RWRE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def set_threads(k: int | None) -> None:
    global _threads
    _threads = None if k is None else max(1, int(k))


@contextmanager
def using_threads(k: int | None):
    global _threads
    old = _threads
    set_threads(k)
    try:
        yield
    finally:
        _threads = old


def pmap(fn, items):
    items = list(items)
    k = threads()
    if k == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))
