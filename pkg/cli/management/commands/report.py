from cli.reports import ITERATION_HEADER
from perfmodel.timing import iteration_rows, simulate_timing
from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Per-iteration timing of every scheme at the config's base point, plus a total row per scheme"

    def run_experiment(self, config, options):
        point = config.at()
        rows = []
        for scheme in point.schemes:
            report = simulate_timing(point.spec, point.topology, scheme, raid_devices=point.devices,
                                     spill_interval=point.interval, host_bytes_free=point.budget)
            rows.extend(iteration_rows(report))
        self.emit(config, ITERATION_HEADER, rows, options)
