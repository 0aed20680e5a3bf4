"""
Django Production Settings
==========================
Settings for shared training hosts: Redis-backed Celery workers, Sentry.
"""

import sentry_sdk
from sentry_sdk.integrations.celery import CeleryIntegration
from sentry_sdk.integrations.redis import RedisIntegration

from .base import *  # noqa: F401, F403

# =============================================================================
# DEBUG (ALWAYS False in production)
# =============================================================================

DEBUG = False

LOGGING['loggers']['apps.uplift_engine']['level'] = 'WARNING'  # noqa: F405

# Ablation variants fan out to workers unless explicitly disabled
UPLIFT_ABLATION_USE_CELERY = env.bool('UPLIFT_ABLATION_USE_CELERY', default=True)  # noqa: F405

# =============================================================================
# SENTRY (Error Tracking)
# =============================================================================

SENTRY_DSN = env('SENTRY_DSN', default='')  # noqa: F405

if SENTRY_DSN:
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        integrations=[
            CeleryIntegration(),
            RedisIntegration(),
        ],
        traces_sample_rate=0.0,
        send_default_pii=False,
        environment=env('SENTRY_ENVIRONMENT', default='production'),  # noqa: F405
    )
