"""Deterministic task mapping with a GENFUN_THREADS worker cap.

Results are collected in submission order and each task is pure, so the output
is identical for any worker count; reductions downstream stay order-stable.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence


def worker_count() -> int:
    raw = os.environ.get("GENFUN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def ordered_map(fn: Callable, items: Sequence) -> list:
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
