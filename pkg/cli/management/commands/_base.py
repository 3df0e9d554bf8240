import logging
from pathlib import Path

import yaml
from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from kv_store.exceptions import CapacityError, DirectIOError, ProtocolError
from cli.reports import render_csv
from cli.serializers import load_config

logger = logging.getLogger("django")

EXIT_MISMATCH = 1
EXIT_INVALID_CONFIG = 2
EXIT_PROTOCOL = 3


class ExperimentCommand(BaseCommand):
    """
    Shared flags and exit codes of the config driven commands. Subclasses
    implement `run_experiment(config, options)` and return the CSV text.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help="experiment config (YAML)")
        parser.add_argument('--out', default=None, help="CSV destination, standard output when omitted")
        parser.add_argument('--seed', type=int, default=None, help="overrides the seed in the config")
        parser.add_argument('--jobs', type=int, default=1, help="dispatch sweep points as celery tasks when > 1")

    def load(self, options):
        try:
            return load_config(options['config'], seed=options['seed'])
        except OSError as exc:
            raise CommandError(f"cannot read config: {exc}", returncode=EXIT_INVALID_CONFIG)
        except yaml.YAMLError as exc:
            raise CommandError(f"config is not valid YAML: {exc}", returncode=EXIT_INVALID_CONFIG)
        except serializers.ValidationError as exc:
            raise CommandError(f"invalid config: {exc.detail}", returncode=EXIT_INVALID_CONFIG)

    def emit(self, config, header, rows, options) -> None:
        text = render_csv(header, rows)
        destination = options['out'] or config.output
        if destination:
            Path(destination).write_text(text)
            logger.info(f"wrote {len(rows)} rows to {destination}")
        else:
            self.stdout.write(text, ending='')

    def handle(self, *args, **options):
        config = self.load(options)
        try:
            self.run_experiment(config, options)
        except (ProtocolError, CapacityError, DirectIOError) as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=EXIT_PROTOCOL)

    def run_experiment(self, config, options):
        raise NotImplementedError
