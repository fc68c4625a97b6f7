"""Ordered process-pool map with a worker cap from ``GEEMVC_THREADS``."""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "GEEMVC_THREADS"


def worker_count(workers: int | None = None) -> int:
    """Explicit ``workers`` wins, then ``GEEMVC_THREADS``, then the CPU count."""
    if workers is None:
        raw = os.environ.get(ENV_VAR, "").strip()
        if raw:
            try:
                workers = int(raw)
            except ValueError:
                raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
        else:
            workers = os.cpu_count() or 1
    return max(1, int(workers))


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """``[func(x) for x in items]``, possibly across processes; order is kept."""
    items = list(items)
    workers = min(worker_count(workers), max(len(items), 1))
    if workers == 1:
        return [func(x) for x in items]
    ctx = multiprocessing.get_context("fork" if os.name == "posix" else "spawn")
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(func, items, chunksize=chunk))
