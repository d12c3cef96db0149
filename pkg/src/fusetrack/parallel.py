"""Deterministic fan-out over a worker pool.

Results always come back in submission order, so parallelism never changes
output bytes. `FUSETRACK_THREADS` caps the pool; 1 disables multiprocessing
entirely (useful under debuggers and in CI).
"""

from __future__ import annotations

import multiprocessing
import os
from typing import Callable, Iterable, Sequence


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("FUSETRACK_THREADS")
    if cap is not None:
        limit = max(1, int(cap))
    else:
        limit = min(4, os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


def ordered_map(fn: Callable, tasks: Sequence) -> list:
    """Like map(fn, tasks) with optional process fan-out, order preserved."""
    n = worker_count(len(tasks))
    if n <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with multiprocessing.Pool(n) as pool:
        return pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * n)))
