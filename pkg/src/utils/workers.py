"""
Per-pair parallelism.

Results always come back in input order, so the number of threads changes
scheduling only, never the output.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from models.errors import ConfigError

T = TypeVar('T')
R = TypeVar('R')


def worker_count(requested: Optional[int] = None) -> int:
    """Thread cap from ``URBANPULSE_THREADS``, defaulting to the CPU count."""
    if requested is not None:
        return max(1, int(requested))
    raw = os.getenv('URBANPULSE_THREADS')
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"URBANPULSE_THREADS must be an integer, got '{raw}'") from e
        if value < 1:
            raise ConfigError(f"URBANPULSE_THREADS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def map_ordered(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    items = list(items)
    n = min(worker_count(threads), len(items))
    if n <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(func, items))
