from concurrent.futures import (
    Executor,
    Future,
    ProcessPoolExecutor,
    ThreadPoolExecutor,
    as_completed,
)
from threading import Lock
from typing import Any, Callable, Iterable, List, Optional


class InlineExecutor(Executor):
    """Executor that runs every submitted job immediately in the calling thread."""

    def __init__(self):
        self._shutdown = False
        self._shutdown_lock = Lock()

    def submit(self, fn: Callable, *args, **kwargs):
        with self._shutdown_lock:
            if self._shutdown:
                raise RuntimeError("cannot schedule new futures after shutdown")

            f = Future()
            try:
                result = fn(*args, **kwargs)
            except BaseException as e:
                f.set_exception(e)
            else:
                f.set_result(result)

            return f

    def shutdown(self, wait=True, **kwargs):
        with self._shutdown_lock:
            self._shutdown = True


def run_executor(
    n_workers: int,
    kind: str,
    fn: Callable,
    iterator: Iterable,
    initializer: Optional[Callable] = None,
    post_fn: Optional[Callable] = None,
) -> List[Any]:
    """Runs per-item jobs inline, in a thread pool, or in a process pool.

    Every item in `iterator` is a tuple of positional arguments for `fn`. Each job must
    derive its randomness from its own arguments (e.g. a sample id) so the outcome does
    not depend on completion order. Results are returned in submission order regardless
    of the executor used.

    Parameters
    ----------
    n_workers : int
        Number of workers. 1 runs everything in the calling thread.
    kind : str
        Type of executor to use. Can be either "thread" or "process".
    fn : Callable
        Function to call with the unpacked items of `iterator`.
    iterator : Iterable
        Yields the argument tuples.
    initializer : Callable, optional
        Function to call to initialize each worker.
    post_fn : Callable, optional
        Called as `post_fn(idx, result)` as soon as each job completes.

    Returns
    -------
    List[Any]
        results of `fn`, in submission order
    """
    if kind not in ("thread", "process"):
        raise ValueError("kind must be either 'thread' or 'process'")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")

    # Create executor
    if n_workers == 1:
        if initializer is not None:
            initializer()
        executor: Executor = InlineExecutor()
    elif kind == "thread":
        executor = ThreadPoolExecutor(n_workers, initializer=initializer)
    else:
        executor = ProcessPoolExecutor(n_workers, initializer=initializer)

    futures = dict()
    try:
        for idx, args in enumerate(iterator):
            futures[executor.submit(fn, *args)] = idx

        results: List[Any] = [None] * len(futures)
        for future in as_completed(futures):
            idx = futures[future]
            results[idx] = future.result()
            if post_fn is not None:
                post_fn(idx, results[idx])
    finally:
        executor.shutdown()

    return results
