from django.core.management.base import CommandError

from cli.experiments import evaluate_sweep, mismatches
from cli.reports import HEADER
from ._base import EXIT_INVALID_CONFIG, EXIT_MISMATCH, ExperimentCommand


class Command(ExperimentCommand):
    help = "Evaluate the Cartesian product of the sweep axes, one CSV row per point and scheme"

    def run_experiment(self, config, options):
        if not config.sweep:
            raise CommandError(f"config {config.name} has no sweep axes", returncode=EXIT_INVALID_CONFIG)
        rows = evaluate_sweep(config, jobs=options['jobs'])
        self.emit(config, HEADER, rows, options)
        diverged = mismatches(rows)
        if diverged:
            raise CommandError(f"{len(diverged)} rows diverged from the oracle", returncode=EXIT_MISMATCH)
