import threading
import logging
from typing import Any, Callable, Sequence

logger = logging.getLogger(__name__)


class ThreadManager:
    """
    Runs independent shard jobs on worker threads and hands the results back
    in shard order, so the caller's merge is the same regardless of which
    thread finished first.
    """
    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))

    @staticmethod
    def split(n: int, parts: int) -> list[tuple[int, int]]:
        """Contiguous [lo, hi) ranges covering 0..n, at most `parts` of them."""
        parts = max(1, min(parts, n)) if n else 1
        bounds = [round(i * n / parts) for i in range(parts + 1)]
        return [(bounds[i], bounds[i + 1]) for i in range(parts)]

    def map(self, job: Callable[[Any], Any], items: Sequence[Any]) -> list[Any]:
        """
        Apply `job` to every item. With threads == 1 this is a plain loop;
        otherwise items are dealt round-robin to worker threads.
        """
        if self.threads == 1 or len(items) <= 1:
            return [job(item) for item in items]

        results: list[Any] = [None] * len(items)
        errors: list[BaseException] = []
        lock = threading.Lock()

        def runner(worker: int):
            for i in range(worker, len(items), self.threads):
                try:
                    results[i] = job(items[i])
                except BaseException as e:
                    with lock:
                        errors.append(e)
                    return

        workers = []
        for w in range(min(self.threads, len(items))):
            t = threading.Thread(target=runner, args=(w,), name=f"shard-{w}", daemon=True)
            t.start()
            workers.append(t)
        for t in workers:
            t.join()

        if errors:
            logger.error(f"[ThreadManager] {len(errors)} shard job(s) failed: {errors[0]}")
            raise errors[0]
        logger.debug(f"[ThreadManager] {len(items)} jobs completed on {len(workers)} threads")
        return results
