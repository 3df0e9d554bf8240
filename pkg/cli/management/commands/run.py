import logging

from django.core.management.base import CommandError

from cli.experiments import evaluate_point, mismatches
from cli.reports import HEADER
from ._base import EXIT_MISMATCH, ExperimentCommand

logger = logging.getLogger("django")


class Command(ExperimentCommand):
    help = "Run every scheme of a config at its base point and write one CSV row per scheme"

    def run_experiment(self, config, options):
        if config.sweep:
            logger.warning(f"run ignores the sweep axes of {config.name}, use sweep for those")
        rows = evaluate_point(config.at())
        self.emit(config, HEADER, rows, options)
        diverged = mismatches(rows)
        if diverged:
            raise CommandError(f"schemes diverged from the oracle: {[row.scheme for row in diverged]}",
                               returncode=EXIT_MISMATCH)
