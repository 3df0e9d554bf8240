"""
Evaluation of experiment points. A point either runs the engine (ledger
bytes, equivalence verdicts) or only the timing model (closed-form bytes).
"""
import itertools
import logging
from dataclasses import dataclass, replace

from celery import group
from django.conf import settings

from engine.harness import run_schemes
from engine.schemes import Scheme
from kv_store.layout import ModelSpec
from perfmodel.timing import closed_form_totals, free_host_bytes, simulate_timing
from perfmodel.topology import Topology
from .reports import MATCH, MISMATCH, NOT_APPLICABLE, ReportRow

logger = logging.getLogger("django")

SPEC_AXES = ('batch', 'prompt_len', 'max_output')
SWEEP_AXES = SPEC_AXES + ('num_csds', 'host_budget_bytes', 'weight_residency')


@dataclass(frozen=True)
class ExperimentConfig:
    spec: ModelSpec
    topology: Topology
    schemes: tuple
    name: str = 'experiment'
    num_csds: int = None
    spill_interval: int = None
    host_budget_bytes: int = None
    seed: int = 0
    functional: bool = False
    # ((axis, (points, ...)), ...) in the order the axes were given
    sweep: tuple = ()
    output: str = ''

    @property
    def devices(self) -> int:
        return self.num_csds or self.topology.num_csds

    @property
    def interval(self) -> int:
        return self.spill_interval or settings.DEFAULT_SPILL_INTERVAL

    @property
    def budget(self) -> int:
        if self.host_budget_bytes is None:
            return free_host_bytes(self.spec, self.topology)
        return self.host_budget_bytes

    def at(self, **overrides) -> "ExperimentConfig":
        """
        the single point with the given axis values
        """
        changes = {'sweep': ()}
        spec_changes = {axis: overrides.pop(axis) for axis in SPEC_AXES if axis in overrides}
        if spec_changes:
            changes['spec'] = replace(self.spec, **spec_changes)
        if 'weight_residency' in overrides:
            changes['topology'] = self.topology.with_overrides(weight_residency=overrides.pop('weight_residency'))
        changes.update(overrides)
        return replace(self, **changes)

    def points(self) -> list:
        """
        Cartesian product of the sweep axes, first axis outermost
        """
        axes = [axis for axis, _ in self.sweep]
        return [self.at(**dict(zip(axes, values))) for values in itertools.product(*(p for _, p in self.sweep))]

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'model': self.spec.as_dict(),
            'topology': self.topology.as_dict(),
            'schemes': [str(scheme) for scheme in self.schemes],
            'num_csds': self.num_csds,
            'spill_interval': self.spill_interval,
            'host_budget_bytes': self.host_budget_bytes,
            'seed': self.seed,
            'functional': self.functional,
            'sweep': {axis: list(points) for axis, points in self.sweep},
            'output': self.output,
        }


def _row(config: ExperimentConfig, scheme, report, traffic, verdict: str, xcache_tokens: int) -> ReportRow:
    spec = config.spec
    return ReportRow(
        scheme=str(scheme),
        layers=spec.layers,
        heads=spec.heads,
        head_dim=spec.head_dim,
        batch=spec.batch,
        prompt_len=spec.prompt_len,
        max_output=spec.max_output,
        num_csds=config.devices,
        spill_interval=config.interval,
        host_budget_bytes=config.budget,
        weight_residency=config.topology.weight_residency,
        topology=config.topology.name,
        xcache_tokens=xcache_tokens,
        tokens_per_second=report.tokens_per_second,
        prefill_seconds=report.prefill_seconds,
        decode_seconds=report.decode_seconds,
        **report.breakdown,
        **traffic.as_dict(),
        verdict=verdict,
    )


def _functional_rows(config: ExperimentConfig) -> list:
    comparison = run_schemes(
        config.spec,
        schemes=config.schemes,
        num_csds=config.devices,
        spill_interval=config.interval,
        host_budget_bytes=config.budget,
        seed=config.seed,
        topology=config.topology,
    )
    rows = []
    for scheme in config.schemes:
        run = comparison.runs[Scheme(scheme)]
        verdict = MATCH if run.tokens == comparison.oracle.tokens else MISMATCH
        rows.append(_row(config, scheme, run.report, run.ledger.totals, verdict, run.xcache_tokens))
    return rows


def _modelled_row(config: ExperimentConfig, scheme) -> ReportRow:
    report = simulate_timing(config.spec, config.topology, scheme, raid_devices=config.devices,
                             spill_interval=config.interval, host_bytes_free=config.budget)
    traffic = closed_form_totals(config.spec, scheme, config.interval, report.xcache_tokens)
    return _row(config, scheme, report, traffic, NOT_APPLICABLE, report.xcache_tokens)


def evaluate_point(config: ExperimentConfig) -> list:
    """
    one ReportRow per scheme, in the order the config lists them
    """
    if config.functional:
        return _functional_rows(config)
    return [_modelled_row(config, scheme) for scheme in config.schemes]


def evaluate_sweep(config: ExperimentConfig, jobs: int = 1) -> list:
    """
    Every sweep point, rows in point order then scheme order whatever the
    completion order. With jobs > 1 the points go out as one celery group.
    """
    points = config.points()
    logger.info(f"sweep {config.name}: {len(points)} points x {len(config.schemes)} schemes, jobs={jobs}")
    if jobs > 1:
        from .tasks import evaluate_sweep_point
        result = group(evaluate_sweep_point.s(point.to_dict()) for point in points).apply_async()
        return [ReportRow(**row) for child in result.results for row in child.get()]
    return [row for point in points for row in evaluate_point(point)]


def mismatches(rows: list) -> list:
    return [row for row in rows if row.verdict == MISMATCH]
