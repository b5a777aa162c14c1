"""Worker fan-out control via the DIGEBENCH_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Configured worker cap; 0 (default) means run serially."""
    raw = os.environ.get("DIGEBENCH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DIGEBENCH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"DIGEBENCH_THREADS must be >= 0, got {n}")
    return n


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Apply fn preserving order; thread fan-out only when workers > 1.

    Every call site passes independent per-item RNG streams, so threaded and
    serial execution produce identical results.
    """
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
