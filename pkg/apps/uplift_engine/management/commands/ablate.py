"""Train and evaluate the full model and its single-flag variants."""

from django.core.management.base import BaseCommand

from apps.uplift_engine.services.experiment import run_ablate
from utils.mixins import RunConfigCommandMixin


class Command(RunConfigCommandMixin, BaseCommand):
    help = 'Run full, matmul_interaction, no_enhancer, untiered and joint_task with identical seeds'

    def run(self, run_config, **options):
        path = run_ablate(run_config)
        self.success(f"Ablation summary written to {path}")
