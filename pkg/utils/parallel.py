from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

from loguru import logger

T = TypeVar("T")
R = TypeVar("R")


def run_parallel(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """
    Apply `fn` to every item and return the results in input order.

    With jobs > 1 the items run in a process pool; `fn` and the items must be
    picklable.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(jobs, len(items))
    logger.debug(f"Running {len(items)} work units on {workers} processes")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
