"""Order-preserving map over independent subtasks, optionally threaded.

Tasks must be independent and internally deterministic; results are combined
in input order, so the outcome never depends on the schedule.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["parallel_map", "resolve_threads"]


def resolve_threads(explicit=None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("MCKV_THREADS")
    return max(1, int(env)) if env else 1


def parallel_map(fn, items, threads=1):
    items = list(items)
    threads = resolve_threads(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
