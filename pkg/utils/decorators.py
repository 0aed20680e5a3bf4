"""
Decorators
==========
Stage timing for training and evaluation runs, and patient collection of
ablation results from the task broker.
"""

import functools
import inspect
import logging
import time
from typing import Callable

from celery.exceptions import TimeoutError as TaskTimeoutError

logger = logging.getLogger(__name__)


def describe_run(arguments: dict) -> str:
    """Short method/seed/output description of the run a call belongs to."""
    run = arguments.get('run')
    if run is not None:
        return f"method={run.method} seed={run.seed} out={run.output_dir}"
    payload = arguments.get('payload')
    if isinstance(payload, dict):
        return f"method={payload.get('method')} seed={payload.get('seed')} out={payload.get('output_dir')}"
    owner = arguments.get('self')
    if owner is not None and hasattr(owner, 'estimator'):
        return f"method={owner.estimator.method} seed={owner.config.seed}"
    if arguments.get('method'):
        return f"method={arguments['method']}"
    return ''


def log_stage_time(stage: str) -> Callable:
    """
    Log how long one pipeline stage took, with the run it belongs to, on the
    logger of the decorated function's module (so a run's train.log picks it
    up). Failures are logged with their elapsed time and re-raised.
    """
    def decorator(func: Callable) -> Callable:
        signature = inspect.signature(func)
        stage_logger = logging.getLogger(func.__module__)

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            bound = signature.bind(*args, **kwargs)
            bound.apply_defaults()
            context = describe_run(bound.arguments)
            started = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as exc:
                stage_logger.warning(f"{stage} failed after {time.perf_counter() - started:.2f}s [{context}]: {exc}")
                raise
            stage_logger.info(f"{stage} finished in {time.perf_counter() - started:.2f}s [{context}]")
            return result

        return wrapper

    return decorator


def retry_on_broker_timeout(max_retries: int = 3, delay: float = 5.0, backoff: float = 2.0) -> Callable:
    """
    Retry waiting on a Celery result when the broker times out. The wrapped
    function takes the ``AsyncResult`` first; its task id goes into the log.
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(async_result, *args, **kwargs):
            task_id = getattr(async_result, 'id', '?')
            wait = delay
            for attempt in range(1, max_retries + 2):
                try:
                    return func(async_result, *args, **kwargs)
                except TaskTimeoutError:
                    if attempt > max_retries:
                        logger.error(f"Task {task_id} still pending after {attempt} waits")
                        raise
                    logger.warning(f"Task {task_id} timed out (wait {attempt}/{max_retries + 1}); retrying in {wait:.1f}s")
                    time.sleep(wait)
                    wait *= backoff

        return wrapper

    return decorator
