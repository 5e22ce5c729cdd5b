import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from types import TracebackType
from typing import Any, Callable, List, Optional, Sequence, Tuple, Type

logger = logging.getLogger(__name__)

ExcInfo = Tuple[Type[BaseException], BaseException, TracebackType]


class Worker():
    '''Runs `func(item)` once and keeps either the result or the error.

        Errors never propagate out of `run`; they are stored as
        `sys.exc_info()` tuples in `exc_info`.
    '''

    def __init__(self, func: Callable, item: Any) -> None:
        self.func = func
        self.item = item
        self.result: Any = None
        self.exc_info: Optional[ExcInfo] = None

    def run(self) -> 'Worker':
        try:
            self.result = self.func(self.item)
        except Exception:
            self.exc_info = sys.exc_info()
        return self


def run_workers(func: Callable, items: Sequence[Any], num_workers: int = 0
                ) -> Tuple[List[Any], List[Tuple[int, ExcInfo]]]:
    '''Applies `func` to every item, in a thread pool when `num_workers` > 0.

        Returns
        -------
        results : list with one entry per item, `None` where the call failed

        errors : list of (item position, exc_info) for the failed calls
    '''
    workers = [Worker(func, item) for item in items]
    if num_workers and num_workers > 0 and len(workers) > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            list(pool.map(Worker.run, workers))
    else:
        for worker in workers:
            worker.run()
    results = [w.result for w in workers]
    errors = [(pos, w.exc_info) for pos, w in enumerate(workers) if w.exc_info is not None]
    return results, errors
