"""Order-preserving process-pool map with a serial fallback."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "DPDAM_THREADS"


def default_threads() -> int:
    """Worker count from ``DPDAM_THREADS``, else the available CPUs."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def pmap(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, spread over processes when ``threads > 1``.

    Results come back in input order, so callers stay deterministic for any
    worker count.
    """
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    threads = min(threads, len(items))
    if threads <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
