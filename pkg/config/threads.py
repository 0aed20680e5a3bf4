"""
BLAS/OpenMP thread cap shared by ``manage.py`` and the Celery worker.
Must run before numpy is first imported in the process.
"""

import os

THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def cap_worker_threads():
    """Copy UPLIFT_NUM_THREADS into the BLAS/OpenMP variables unless they are already set."""
    threads = os.environ.get('UPLIFT_NUM_THREADS', '0')
    if not threads.isdigit() or int(threads) <= 0:
        return
    for var in THREAD_VARIABLES:
        os.environ.setdefault(var, threads)
