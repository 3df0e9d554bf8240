from django.core.management.base import BaseCommand, CommandError

from cli.suites import SUITES, run_suites
from ._base import EXIT_MISMATCH


class Command(BaseCommand):
    help = "Run the property suites and report which ones fail"

    def add_arguments(self, parser):
        parser.add_argument('--suite', dest='suites', action='append', choices=list(SUITES),
                            help="run only this suite, may be repeated")

    def handle(self, *args, **options):
        results = run_suites(options['suites'])
        for name, failures in results.items():
            if not failures:
                self.stdout.write(f"{name}: ok")
                continue
            self.stdout.write(f"{name}: FAILED")
            for failure in failures[:5]:
                self.stdout.write(f"    {failure}")
            if len(failures) > 5:
                self.stdout.write(f"    ... {len(failures) - 5} more")
        failed = [name for name, failures in results.items() if failures]
        if failed:
            raise CommandError(f"failing suites: {', '.join(failed)}", returncode=EXIT_MISMATCH)
        self.stdout.write(f"all {len(results)} suites passed")
