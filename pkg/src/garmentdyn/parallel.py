"""Deterministic chunked parallelism.

Work over elements is cut into chunks whose boundaries depend only on the
element count, never on the worker count, and results are concatenated in
chunk order. Any reduction done afterwards therefore sees the same operands
in the same order regardless of GARMENTDYN_THREADS.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor

CHUNK = 4096

_lock = threading.Lock()
_pools: dict[int, ThreadPoolExecutor] = {}


def thread_count() -> int:
    raw = os.environ.get("GARMENTDYN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _pool(n: int) -> ThreadPoolExecutor:
    with _lock:
        pool = _pools.get(n)
        if pool is None:
            pool = _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="garmentdyn")
        return pool


def chunk_slices(n: int, chunk: int = CHUNK) -> list[slice]:
    return [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def map_chunks(fn, n: int, chunk: int = CHUNK) -> list:
    """Evaluate ``fn(slice)`` over fixed-size chunks of ``range(n)``, in order."""
    slices = chunk_slices(n, chunk)
    workers = min(thread_count(), len(slices))
    if workers <= 1:
        return [fn(s) for s in slices]
    return list(_pool(workers).map(fn, slices))
