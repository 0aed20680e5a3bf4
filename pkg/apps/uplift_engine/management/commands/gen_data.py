"""Generate a synthetic randomized-trial dataset with its oracle effects."""

from django.core.management.base import BaseCommand

from apps.uplift_engine.services.experiment import run_gen_data
from utils.mixins import RunConfigCommandMixin


class Command(RunConfigCommandMixin, BaseCommand):
    help = 'Write dataset.csv, oracle.csv and manifest.json from the data.synthetic section'

    def run(self, run_config, **options):
        result = run_gen_data(run_config)
        self.success(f"Generated {result.rows} samples in {run_config.output_dir}")
