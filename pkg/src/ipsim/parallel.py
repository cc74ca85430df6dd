"""Replica scheduling over an optional process pool.

Pool size comes from the ``SIM_WORKERS`` environment variable (default 1,
meaning in-process).  Results come back in task order, so aggregation does not
depend on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("SIM_WORKERS", "1") or 1)
    return max(1, int(workers))


def replica_map(fn: Callable[[T], R], tasks: Iterable[T], workers: int | None = None) -> list[R]:
    tasks = list(tasks)
    n = worker_count(workers)
    if n == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * n))
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))
