"""Train the configured estimator and write its checkpoint."""

from django.core.management.base import BaseCommand

from apps.uplift_engine.services.experiment import run_train
from utils.mixins import RunConfigCommandMixin


class Command(RunConfigCommandMixin, BaseCommand):
    help = 'Train mtmt, s-learner or t-learner on the training split'

    def run(self, run_config, **options):
        result = run_train(run_config)
        final = result.epoch_losses[-1] if result.epoch_losses else float('nan')
        self.success(
            f"Trained {run_config.method} for {len(result.epoch_losses)} epochs "
            f"(final loss {final:.6f}); checkpoint {result.checkpoint_path}"
        )
