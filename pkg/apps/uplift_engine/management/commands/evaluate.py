"""Evaluate a checkpoint with QINI, AUUC and LIFT@k per task and treatment."""

from django.core.management.base import BaseCommand

from apps.uplift_engine.services.experiment import run_evaluate
from utils.mixins import RunConfigCommandMixin


class Command(RunConfigCommandMixin, BaseCommand):
    help = 'Write report.csv, report.txt, curves and effect summaries for a checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Checkpoint file (default: <out>/checkpoint.json)')
        parser.add_argument('--dataset', help='CSV to evaluate in full (default: the configured test split)')

    def run(self, run_config, **options):
        result = run_evaluate(run_config, checkpoint_path=options.get('checkpoint'),
                              dataset_path=options.get('dataset'))
        for row in result.report.rows:
            self.stdout.write(
                f"task {row.task} treatment {row.treatment}: "
                f"qini {row.qini:.6f} auuc {row.auuc:.6f} lift {row.lift:.6f}"
            )
        self.success(f"Report written to {result.output_dir}")
