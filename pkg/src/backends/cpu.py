import concurrent.futures
import logging

import psutil
from tqdm import tqdm

from src.evalkit import score_video
from .base import EvalBackend

logger = logging.getLogger(__name__)

_worker_model = None


def _init_worker(model):
    """
    Install the shared model once per worker process.
    Must be at module level for multiprocessing pickling.
    """
    global _worker_model
    _worker_model = model


def score_video_worker(record, job):
    """
    Worker function scoring one video against the installed model.
    """
    return score_video(_worker_model, record, job)


class CPUBackend(EvalBackend):
    """
    CPU-based backend using a process pool; parameters are shipped once per worker.
    """

    def __init__(self, num_workers=None, progress=False, **_):
        self.num_workers = num_workers or psutil.cpu_count(logical=False) or 1
        self.progress = progress
        self.pool = None

    def init(self):
        """The pool is created lazily, when the model is known."""
        pass

    def score_videos(self, model, records, job):
        if self.pool:
            self.pool.shutdown()
        self.pool = concurrent.futures.ProcessPoolExecutor(
            max_workers=self.num_workers, initializer=_init_worker, initargs=(model,)
        )
        logger.info("scoring %d videos on %d worker processes", len(records), self.num_workers)

        futures = [self.pool.submit(score_video_worker, record, job) for record in records]
        index = {f: i for i, f in enumerate(futures)}
        results = [None] * len(futures)
        done = concurrent.futures.as_completed(futures)
        for future in tqdm(done, total=len(futures), desc="eval", unit="video", disable=not self.progress, leave=False):
            results[index[future]] = future.result()
        return results

    def cleanup(self):
        """Shutdown the pool."""
        if self.pool:
            self.pool.shutdown()
            self.pool = None
