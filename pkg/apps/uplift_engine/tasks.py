"""
Uplift Engine Celery Tasks
==========================
Background training of ablation variants.
"""

import logging

from celery import shared_task

from apps.uplift_engine.services.experiment import run_variant

logger = logging.getLogger(__name__)


@shared_task(bind=True, acks_late=True)
def run_ablation_variant(self, payload: dict):
    """
    Train and evaluate one ablation variant into its own output directory.

    Args:
        payload: Resolved run configuration of the variant (JSON-safe)

    Returns:
        The variant's report rows
    """
    logger.info(f"Task {self.request.id}: training variant into {payload['output_dir']}")
    try:
        return run_variant(payload)
    except Exception:
        logger.exception(f"Variant in {payload['output_dir']} failed")
        raise
