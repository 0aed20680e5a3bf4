"""
Celery Configuration for the Uplift Engine
==========================================
Configures Celery for asynchronous task processing.
Used to train ablation variants in parallel on worker hosts.
"""

import os

from celery import Celery

from .threads import cap_worker_threads

# Set the default Django settings module
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings.production')

# Workers import numpy through the tasks; cap its thread pools first
cap_worker_threads()

# Create Celery app
app = Celery('uplift_engine')

# Load config from Django settings, using CELERY_ namespace
app.config_from_object('django.conf:settings', namespace='CELERY')

# Auto-discover tasks in all installed apps
app.autodiscover_tasks()

# =============================================================================
# TASK ROUTING
# =============================================================================

app.conf.task_routes = {
    'apps.uplift_engine.tasks.run_ablation_variant': {'queue': 'training'},
}

app.conf.task_default_retry_delay = 2
app.conf.task_max_retries = 3
