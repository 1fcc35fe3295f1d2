""" Ordered worker pool used for pixel chunks and Monte Carlo trials. """

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    """Returns the machine parallelism (at least 1)."""
    return max(1, os.cpu_count() or 1)


def ordered_map(
    func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1
) -> list[R]:
    """
    Applies func to every item and returns the results in input order.

    Each item is evaluated independently, so the output does not depend on the
    number of threads; any reduction is left to the caller.

    Args:
        func (Callable[[T], R]): Pure function of one item.
        items (Iterable[T]): Work items.
        threads (Optional[int]): Worker count; None means machine parallelism.

    Returns:
        list[R]: Results, one per item, in the order of items.
    """
    work = list(items)
    workers = default_threads() if threads is None else max(1, int(threads))

    if workers == 1 or len(work) <= 1:
        return [func(item) for item in work]

    with ThreadPoolExecutor(max_workers=min(workers, len(work))) as pool:
        return list(pool.map(func, work))
