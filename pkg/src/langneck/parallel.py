import concurrent.futures
import os
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_MAX_WORKERS = 4


def worker_count() -> int:
    """Worker threads to use: LANGNECK_THREADS if set, else min(4, cpu count)."""
    env_value = os.environ.get("LANGNECK_THREADS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            return 1
    return max(1, min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1))


def run_ordered(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """
    Executes fn over items in a thread pool.
    Results come back in input order, so serial and parallel runs agree exactly.
    """
    items = list(items)
    workers = workers if workers is not None else worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[Optional[R]] = [None] * len(items)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results
