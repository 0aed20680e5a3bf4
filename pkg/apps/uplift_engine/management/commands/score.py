"""Rank treatment candidates for each user in a feature file."""

from django.core.management.base import BaseCommand

from apps.uplift_engine.services.experiment import run_score
from utils.exceptions import UsageError
from utils.mixins import RunConfigCommandMixin


class Command(RunConfigCommandMixin, BaseCommand):
    help = 'Write scores.csv with every candidate assignment, its Gamma values and rank'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Checkpoint file (default: <out>/checkpoint.json)')
        parser.add_argument('--features', help='CSV of feature rows to score')

    def run(self, run_config, **options):
        if not options.get('features'):
            raise UsageError("score needs --features", 'features')
        path = run_score(run_config, options['features'], checkpoint_path=options.get('checkpoint'))
        self.success(f"Scores written to {path}")
