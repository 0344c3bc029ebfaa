import logging
import os
import threading

import numpy as np
from tqdm import tqdm

logger = logging.getLogger(__name__)

# Stage codes for seed fan-out. Append only: changing a code changes every derived seed.
SEED_STAGES = {
    'data': 1, 'split': 2, 'target_draw': 3, 'target_gan': 4, 'shadow_draw': 5, 'shadow_gan': 6,
    'classifier': 7, 'full_bb': 8, 'codes': 9, 'compare': 10, 'mia': 11, 'mitigation': 12,
    'reference_gan': 13, 'gan_streams': 14, 'figure': 15,
}


def derive_seed(master_seed: int, stage: str, *index: int) -> int:
    """64-bit stream seed for (stage, index...) under one master seed."""
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(SEED_STAGES[stage], *index))
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int(high) << 32 | int(low)


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get('GANPROP_WORKERS', default)))
    except ValueError:
        logger.warning("Ignoring invalid GANPROP_WORKERS=%r", os.environ.get('GANPROP_WORKERS'))
        return default


class QueryCounter:
    """Thread-safe count of samples served."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def add(self, count: int) -> int:
        with self._lock:
            self.value += count
            return self.value


class Job:
    def __init__(self, thread: threading.Thread):
        self.thread = thread
        self.result = None
        self.error: BaseException | None = None

    def wait(self):
        self.thread.join()
        if self.error is not None:
            raise self.error
        return self.result


class LocalJobPool:
    """
    A simple background job runner using Python threads.
    Used for the independent model trainings of a run (targets, shadows) and for
    attack trials. At most ``max_workers`` jobs execute at once; results come back
    in submission order, so a run's output does not depend on the worker count.
    """
    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, max_workers)
        self._slots = threading.BoundedSemaphore(self.max_workers)
        self._jobs: list[Job] = []

    def enqueue(self, func, **kwargs) -> Job:
        # Wraps the task in a thread that waits for a free slot before running.
        def thread_wrapper(job, target_func, kwargs):
            with self._slots:
                try:
                    job.result = target_func(**kwargs)
                except BaseException as error:  # re-raised from wait()
                    job.error = error

        job = Job(thread=None)
        job.thread = threading.Thread(target=thread_wrapper, args=(job, func, kwargs), daemon=True)
        self._jobs.append(job)
        job.thread.start()
        return job

    def results(self, progress: str | None = None) -> list:
        jobs, self._jobs = self._jobs, []
        for job in tqdm(jobs, desc=progress, disable=progress is None, leave=False):
            job.thread.join()
        return [job.wait() for job in jobs]

    def map(self, func, items: list[dict], progress: str | None = None) -> list:
        for kwargs in items:
            self.enqueue(func, **kwargs)
        return self.results(progress)
