"""
Mixins
======
Reusable pieces for the uplift engine's management commands.
"""

import logging

from django.core.management.base import CommandError

from apps.uplift_engine.constants import ExitCode
from utils.exceptions import UpliftEngineBaseException

logger = logging.getLogger(__name__)


class RunConfigCommandMixin:
    """
    Adds the global --config/--seed/--out flags and turns engine exceptions
    into CommandError with the exception's exit status (2 usage, 3 data,
    4 runtime). Subclasses implement ``run(run_config, **options)``.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', dest='config', help='YAML run configuration')
        parser.add_argument('--seed', dest='seed', type=int, help='Seed for data, splits and training')
        parser.add_argument('--out', dest='out', help='Output directory')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_run_config(self, options):
        from apps.uplift_engine.services.experiment import load_run_config

        return load_run_config(options.get('config'), seed=options.get('seed'), output_dir=options.get('out'))

    def handle(self, *args, **options):
        try:
            run_config = self.load_run_config(options)
            return self.run(run_config, **options)
        except UpliftEngineBaseException as exc:
            logger.error(f"{exc.code}: {exc.message}")
            raise CommandError(exc.message, returncode=exc.exit_code) from exc
        except CommandError:
            raise
        except Exception as exc:
            logger.exception(f"Command failed: {exc}")
            raise CommandError(str(exc), returncode=ExitCode.RUNTIME) from exc

    def run(self, run_config, **options):
        raise NotImplementedError

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
