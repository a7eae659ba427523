"""Worker-count control shared by the ray caster, decoder and rasterizer.

Work is always split into fixed-size chunks whose results are merged in
chunk order, so outputs do not depend on the number of workers.  BLAS is
held at one thread: a multi-threaded GEMM may change its reduction order
with the thread count, which would break bitwise reproducibility.
"""
from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

_threads = 1


def get_threads() -> int:
    return _threads


def set_threads(n: int | None) -> None:
    global _threads
    _threads = max(1, int(n or os.cpu_count() or 1))


@contextlib.contextmanager
def threads(n: int | None):
    """Set our worker count and pin BLAS to one thread for the block."""
    global _threads
    prev = _threads
    set_threads(n)
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        _threads = prev


def pmap(fn, items):
    items = list(items)
    if _threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=_threads) as ex:
        return list(ex.map(fn, items))
