"""
Closed-form traffic per transformer block and the analytical timing model.

A stage (one layer of prefill or of one decode iteration) takes as long as
its slowest resource: every link moves its bytes at its bandwidth, every
compute unit runs its FLOPs at its throughput, all of them overlapped. Only
the plain ANS device write is serialized behind the attention. The stage time
is charged to the components that kept the slowest resource busy, so the
breakdown always sums to the total.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

from django.conf import settings

from engine.schemes import NEAR_STORAGE_SCHEMES, Scheme
from kv_store.layout import ModelSpec, round_up
from .exceptions import DomainError
from .ledger import LinkBytes
from .topology import Topology

logger = logging.getLogger("django")

COMPONENTS = ('kv_io', 'weight_io', 'compute', 'writeback')
PREFIX_SCHEMES = (Scheme.ANS_WB_X, Scheme.KV_IN_HOST)


def _spilled_rows(iteration: int, max_output: int, interval: int) -> int:
    if iteration % interval == 0:
        return interval
    if iteration == max_output - 1:
        return iteration % interval
    return 0


def _prefix_tokens(scheme: str, t_prev: int, cached_tokens: int) -> int:
    return min(cached_tokens, t_prev) if scheme in PREFIX_SCHEMES else 0


def traffic_closed_form(spec: ModelSpec, scheme: str, iteration: int, spill_interval: int = None,
                        xcache_tokens: int = 0) -> LinkBytes:
    """
    bytes per transformer block moved in one iteration (0 is the prefill)
    """
    if not 0 <= iteration < spec.max_output:
        raise DomainError(f"iteration {iteration} outside [0, {spec.max_output})")
    interval = spill_interval or settings.DEFAULT_SPILL_INTERVAL
    strip_rows = spec.strips_per_layer * spec.row_bytes
    # one K and one V row for every strip of the block
    kv_rows = 2 * strip_rows
    x_row = spec.batch * spec.hidden * spec.elem_bytes
    out = LinkBytes()
    if iteration == 0:
        out.host_interconnect_write = spec.prompt_len * kv_rows
        if scheme == Scheme.ANS_WB_X:
            out.host_mem_traffic = min(spec.prompt_len, xcache_tokens) * x_row
        return out

    t_prev = spec.prompt_len + iteration - 1
    if scheme == Scheme.BASELINE_MEM:
        out.host_interconnect_read = t_prev * kv_rows
        out.host_interconnect_write = kv_rows
        return out

    out.host_interconnect_read = strip_rows
    if scheme == Scheme.ANS:
        out.host_interconnect_write = 3 * strip_rows
        out.csd_internal_read = t_prev * kv_rows
        out.csd_internal_write = kv_rows
        return out

    pending_before = (iteration - 1) % interval
    used = t_prev - pending_before
    prefix = _prefix_tokens(scheme, t_prev, xcache_tokens)
    out.host_interconnect_write = strip_rows + (t_prev + 1 - max(used, prefix)) * kv_rows
    out.csd_internal_read = max(0, used - prefix) * kv_rows
    out.spill_write = _spilled_rows(iteration, spec.max_output, interval) * kv_rows
    out.host_mem_traffic = kv_rows
    if scheme == Scheme.ANS_WB_X:
        if t_prev < xcache_tokens:
            out.host_mem_traffic += x_row
        out.host_mem_traffic += prefix * x_row
    elif scheme == Scheme.KV_IN_HOST:
        out.host_mem_traffic += prefix * kv_rows
    return out


def closed_form_totals(spec: ModelSpec, scheme: str, spill_interval: int = None,
                       xcache_tokens: int = 0) -> LinkBytes:
    total = LinkBytes()
    for iteration in range(spec.max_output):
        total = total + traffic_closed_form(spec, scheme, iteration, spill_interval, xcache_tokens)
    return total.scaled(spec.layers)


def ans_traffic_ratio(s: int) -> Fraction:
    """
    baseline over ANS host link bytes of the first decode iteration
    """
    if s <= 1:
        raise DomainError(f"the ratio is defined for prompts longer than one token, got {s}")
    return Fraction(s + 1, 2)


def weight_bytes(spec: ModelSpec) -> int:
    return settings.PERF_FLOPS['weights_per_block'] * spec.hidden * spec.hidden * spec.elem_bytes * spec.layers


def free_host_bytes(spec: ModelSpec, topo: Topology) -> int:
    """
    host memory left for a cache once the host-resident weights are in place
    """
    resident = (1.0 - topo.weight_residency) * weight_bytes(spec)
    return max(0, int(topo.host_mem_budget - resident))


def cache_capacity(spec: ModelSpec, scheme: str, budget: int) -> int:
    per_token = spec.layers * spec.batch * spec.hidden * spec.elem_bytes
    if scheme == Scheme.KV_IN_HOST:
        per_token *= 2
    return min(spec.context, int(budget) // per_token)


@dataclass
class StageTiming:
    iteration: int
    seconds: float
    bottleneck: str
    breakdown: dict


@dataclass
class TimingReport:
    scheme: str
    prefill_seconds: float
    decode_seconds: float
    breakdown: dict
    tokens_per_second: float
    iterations: list = field(default_factory=list)
    # spill time that overlaps later iterations and never enters the total
    hidden_writeback_seconds: float = 0.0
    xcache_tokens: int = 0

    @property
    def total_seconds(self) -> float:
        return self.prefill_seconds + self.decode_seconds

    @property
    def bottleneck(self) -> str:
        return max(COMPONENTS, key=lambda name: self.breakdown[name])


def _settle(resources: list, serial: dict = None) -> tuple:
    """
    resources are (seconds, {component: seconds}) pairs, the first slowest wins
    """
    seconds, parts = max(resources, key=lambda resource: resource[0])
    breakdown = dict.fromkeys(COMPONENTS, 0.0)
    for name, value in parts.items():
        breakdown[name] += value
    for name, value in (serial or {}).items():
        breakdown[name] += value
        seconds += value
    return seconds, breakdown, max(COMPONENTS, key=lambda name: breakdown[name])


class _StageModel:

    def __init__(self, spec: ModelSpec, topo: Topology, scheme: str, devices: int, interval: int):
        flops = settings.PERF_FLOPS
        self.spec = spec
        self.topo = topo
        self.scheme = scheme
        self.interval = interval
        self.block = settings.DIRECT_IO_BLOCK_BYTES
        self.near_storage = scheme in NEAR_STORAGE_SCHEMES
        strips = spec.strips_per_layer
        hidden = spec.hidden
        self.strips = strips
        self.kv_rows = 2 * strips * spec.row_bytes
        self.x_row = spec.batch * hidden * spec.elem_bytes
        self.per_device = math.ceil(strips / devices)
        self.gemv = flops['gemv_per_element']
        self.linear_flops = self.gemv * flops['weights_per_block'] * hidden * hidden * spec.batch
        self.regen_flops = 2 * self.gemv * spec.batch * hidden * hidden
        # q.K^T and p.V over d elements plus the softmax, per strip and token
        self.attention_flops = 2 * self.gemv * spec.head_dim + flops['softmax_per_element']
        self.storage_read = min(devices * topo.bw_ssd_read, topo.bw_host_interconnect)
        self.storage_write = min(devices * topo.bw_ssd_write, topo.bw_host_interconnect)
        layer_weights = weight_bytes(spec) / spec.layers
        stream = layer_weights / topo.bw_weight_link
        self.weight_stream = (stream, {'weight_io': stream})
        self.weight_from_ssd = topo.weight_residency * layer_weights / self.storage_read
        self.kv_in_memory = topo.kv_residency == 'memory' and not self.near_storage

    def _storage_link(self, kv_seconds: float) -> list:
        if self.kv_in_memory:
            return [(kv_seconds, {'kv_io': kv_seconds}),
                    (self.weight_from_ssd, {'weight_io': self.weight_from_ssd})]
        return [(kv_seconds + self.weight_from_ssd, {'kv_io': kv_seconds, 'weight_io': self.weight_from_ssd})]

    def _host_compute(self, flops: float) -> tuple:
        seconds = flops / self.topo.t_host_compute
        return seconds, {'compute': seconds}

    def prefill(self) -> tuple:
        s = self.spec.prompt_len
        kv_bytes = s * self.kv_rows
        if self.kv_in_memory:
            kv_seconds = kv_bytes / self.topo.bw_host_memory
        else:
            kv_seconds = kv_bytes / self.storage_write
        flops = self.linear_flops * s + self.strips * self.attention_flops * s * (s + 1) / 2
        return _settle(self._storage_link(kv_seconds) + [self.weight_stream, self._host_compute(flops)])

    def decode(self, iteration: int, cached_tokens: int) -> tuple:
        """
        (seconds, breakdown, bottleneck, hidden writeback seconds) of one layer
        """
        t_prev = self.spec.prompt_len + iteration - 1
        topo = self.topo
        if not self.near_storage:
            read, write = t_prev * self.kv_rows, self.kv_rows
            if self.kv_in_memory:
                kv_seconds = (read + write) / topo.bw_host_memory
            else:
                kv_seconds = read / self.storage_read + write / self.storage_write
            flops = self.linear_flops + self.strips * self.attention_flops * (t_prev + 1)
            return _settle(self._storage_link(kv_seconds) + [self.weight_stream, self._host_compute(flops)]) + (0.0,)

        link = traffic_closed_form(self.spec, self.scheme, iteration, self.interval, cached_tokens)
        prefix = _prefix_tokens(self.scheme, t_prev, cached_tokens)
        device_tokens = link.csd_internal_read // self.kv_rows
        host_link = link.host_interconnect() / topo.bw_host_interconnect
        csd_read = (self.per_device * device_tokens * 2 * self.spec.row_bytes
                    / min(topo.bw_csd_internal, topo.bw_ssd_read))
        accel = self.per_device * self.attention_flops * (t_prev + 1 - prefix) / topo.t_accel_compute
        host_flops = self.linear_flops
        resources = [
            (host_link + self.weight_from_ssd, {'kv_io': host_link, 'weight_io': self.weight_from_ssd}),
            (csd_read, {'kv_io': csd_read}),
            (accel, {'compute': accel}),
            self.weight_stream,
        ]
        if self.scheme == Scheme.ANS_WB_X:
            host_flops += self.regen_flops * prefix + self.strips * self.attention_flops * prefix
            x_read = prefix * self.x_row / topo.bw_host_memory
            resources.append((x_read, {'kv_io': x_read}))
        elif self.scheme == Scheme.KV_IN_HOST:
            cpu = self.strips * self.attention_flops * prefix / topo.t_cpu_compute
            kv_read = prefix * self.kv_rows / topo.bw_host_memory
            resources += [(cpu, {'compute': cpu}), (kv_read, {'kv_io': kv_read})]
        resources.append(self._host_compute(host_flops))

        serial = None
        hidden = 0.0
        if self.scheme == Scheme.ANS:
            serial = {'writeback': self.per_device * 2 * round_up(self.spec.row_bytes, self.block) / topo.bw_ssd_write}
        else:
            spilled = link.spill_write // self.kv_rows
            if spilled:
                hidden = self.per_device * 2 * round_up(spilled * self.spec.row_bytes, self.block) / topo.bw_ssd_write
        return _settle(resources, serial) + (hidden,)

    def decode_seconds(self, cached_tokens: int) -> float:
        return sum(self.decode(i, cached_tokens)[0] for i in range(1, self.spec.max_output))


def simulate_timing(spec: ModelSpec, topo: Topology, scheme: str, raid_devices: int = None,
                    spill_interval: int = None, host_bytes_free: int = None) -> TimingReport:
    """
    Model one generation. `raid_devices` is the RAID0 width for the baseline
    and the CSD count for the near-storage schemes, the topology's device
    count when omitted. For the cache schemes the cached prefix is the split
    point that minimizes decode time among those the budget can hold.
    """
    devices = topo.num_csds if raid_devices is None else raid_devices
    if devices < 1:
        raise DomainError(f"need at least one device, got {devices}")
    interval = spill_interval or settings.DEFAULT_SPILL_INTERVAL
    model = _StageModel(spec, topo, Scheme(scheme), devices, interval)
    layers = spec.layers

    cached = 0
    if scheme in PREFIX_SCHEMES:
        budget = free_host_bytes(spec, topo) if host_bytes_free is None else host_bytes_free
        step = max(1, math.ceil(spec.context / settings.PERF_XCACHE_SPLIT_STEPS))
        candidates = range(0, cache_capacity(spec, scheme, budget) + 1, step)
        cached = min(candidates, key=model.decode_seconds)

    seconds, breakdown, bottleneck = model.prefill()
    stages = [StageTiming(0, layers * seconds, bottleneck, {k: layers * v for k, v in breakdown.items()})]
    hidden_total = 0.0
    for iteration in range(1, spec.max_output):
        seconds, breakdown, bottleneck, hidden = model.decode(iteration, cached)
        stages.append(StageTiming(iteration, layers * seconds, bottleneck,
                                  {k: layers * v for k, v in breakdown.items()}))
        hidden_total += layers * hidden

    totals = dict.fromkeys(COMPONENTS, 0.0)
    for stage in stages:
        for name in COMPONENTS:
            totals[name] += stage.breakdown[name]
    prefill_seconds = stages[0].seconds
    decode_seconds = sum(stage.seconds for stage in stages[1:])
    report = TimingReport(
        scheme=str(scheme),
        prefill_seconds=prefill_seconds,
        decode_seconds=decode_seconds,
        breakdown=totals,
        tokens_per_second=spec.batch * spec.max_output / (prefill_seconds + decode_seconds),
        iterations=stages,
        hidden_writeback_seconds=hidden_total,
        xcache_tokens=cached,
    )
    logger.debug(f"{scheme} on {topo.name} with {devices} devices: {report.total_seconds:.4g} s, "
                 f"{report.tokens_per_second:.4g} tokens/s")
    return report


def bottleneck_share(report: TimingReport) -> float:
    total = report.total_seconds
    return report.breakdown['kv_io'] / total if total > 0 else 0.0


def iteration_rows(report: TimingReport) -> list:
    """
    one row per stage plus a summary row
    """
    rows = []
    for stage in report.iterations:
        rows.append({
            'scheme': report.scheme,
            'phase': 'prefill' if stage.iteration == 0 else 'decode',
            'iteration': stage.iteration,
            'seconds': stage.seconds,
            'bottleneck': stage.bottleneck,
            **stage.breakdown,
        })
    rows.append({
        'scheme': report.scheme,
        'phase': 'total',
        'iteration': len(report.iterations) - 1,
        'seconds': report.total_seconds,
        'bottleneck': report.bottleneck,
        **report.breakdown,
    })
    return rows
