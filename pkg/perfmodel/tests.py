from fractions import Fraction

from django.test import SimpleTestCase

from engine.schemes import FUNCTIONAL_SCHEMES, Scheme
from kv_store.layout import ModelSpec
from perfmodel.exceptions import DomainError, PresetNotFound
from perfmodel.ledger import LinkBytes, TrafficLedger
from perfmodel.presets import get_topology, get_workload
from perfmodel.serializers import TopologySerializer
from perfmodel.timing import (
    COMPONENTS,
    ans_traffic_ratio,
    bottleneck_share,
    closed_form_totals,
    iteration_rows,
    simulate_timing,
    traffic_closed_form,
)
from perfmodel.topology import RATE_FIELDS


def make_spec(**overrides):
    fields = dict(layers=1, heads=2, head_dim=8, batch=2, prompt_len=4, max_output=4)
    fields.update(overrides)
    return ModelSpec(**fields)


class TrafficLedgerTest(SimpleTestCase):

    def test_credits_per_iteration_and_device(self):
        ledger = TrafficLedger(2)
        ledger.credit('host_interconnect_write', 100)
        ledger.begin_iteration(1)
        ledger.credit('csd_internal_read', 40, device_id=1)
        ledger.credit('csd_internal_read', 60, device_id=0)
        self.assertEqual(ledger.at(0).host_interconnect_write, 100)
        self.assertEqual(ledger.at(1).csd_internal_read, 100)
        self.assertEqual(ledger.csd_internal_read, [60, 40])
        self.assertEqual(ledger.decode_totals().host_interconnect_write, 0)
        self.assertEqual(ledger.totals.host_interconnect(), 100)

    def test_counters_only_grow(self):
        ledger = TrafficLedger()
        with self.assertRaises(ValueError):
            ledger.credit('spill_write', -1)
        with self.assertRaises(KeyError):
            ledger.credit('pcie', 1)
        ledger.begin_iteration(3)
        with self.assertRaises(ValueError):
            ledger.begin_iteration(2)

    def test_snapshot_is_a_copy(self):
        ledger = TrafficLedger()
        ledger.credit('host_mem_traffic', 8)
        snapshot = ledger.snapshot()
        ledger.credit('host_mem_traffic', 8)
        self.assertEqual(snapshot['totals']['host_mem_traffic'], 8)

    def test_link_bytes_arithmetic(self):
        total = LinkBytes(spill_write=3) + LinkBytes(spill_write=4, host_mem_traffic=1)
        self.assertEqual(total.scaled(2), LinkBytes(spill_write=14, host_mem_traffic=2))


class ClosedFormTest(SimpleTestCase):

    def test_baseline_first_decode(self):
        spec = make_spec()
        link = traffic_closed_form(spec, Scheme.BASELINE_MEM, 1)
        self.assertEqual(link.host_interconnect_read, 4 * 2 * 2 * 2 * 8 * 2)
        self.assertEqual(link.host_interconnect_write, 2 * 2 * 2 * 8 * 2)

    def test_ans_ships_q_k_v(self):
        link = traffic_closed_form(make_spec(), Scheme.ANS, 1)
        self.assertEqual(link.host_interconnect_write, 192)
        self.assertEqual(link.host_interconnect_read, 64)
        self.assertEqual(link.csd_internal_read, 4 * 2 * 2 * 2 * 8 * 2)

    def test_prefill_write_is_the_same_for_every_scheme(self):
        spec = make_spec()
        for scheme in FUNCTIONAL_SCHEMES:
            self.assertEqual(traffic_closed_form(spec, scheme, 0).host_interconnect_write, 512)

    def test_ratio(self):
        self.assertEqual(ans_traffic_ratio(3), 2.0)
        self.assertEqual(ans_traffic_ratio(15), 8.0)
        with self.assertRaises(DomainError):
            ans_traffic_ratio(1)

    def test_ratio_matches_closed_form_exactly(self):
        for s in range(2, 1025):
            spec = make_spec(prompt_len=s, max_output=2)
            baseline = traffic_closed_form(spec, Scheme.BASELINE_MEM, 1).host_interconnect()
            ans = traffic_closed_form(spec, Scheme.ANS, 1).host_interconnect()
            self.assertEqual(Fraction(baseline, ans), ans_traffic_ratio(s))

    def test_ans_host_bytes_do_not_depend_on_prompt(self):
        decode_totals = [
            sum(traffic_closed_form(make_spec(prompt_len=s), Scheme.ANS, i).host_interconnect() for i in range(1, 4))
            for s in (4, 400)
        ]
        self.assertEqual(decode_totals[0], decode_totals[1])
        self.assertGreater(closed_form_totals(make_spec(prompt_len=400), Scheme.ANS).csd_internal_read,
                           closed_form_totals(make_spec(prompt_len=4), Scheme.ANS).csd_internal_read)
        decode = [traffic_closed_form(make_spec(prompt_len=s), Scheme.ANS, 2).host_interconnect()
                  for s in (3, 30, 300)]
        self.assertEqual(len(set(decode)), 1)

    def test_writeback_resends_pending_rows(self):
        spec = make_spec(max_output=6)
        strip_rows = 2 * 2 * 16
        writes = [traffic_closed_form(spec, Scheme.ANS_WB, i, spill_interval=2).host_interconnect_write
                  for i in range(1, 6)]
        self.assertEqual(writes, [3 * strip_rows, 5 * strip_rows] * 2 + [3 * strip_rows])
        spills = [traffic_closed_form(spec, Scheme.ANS_WB, i, spill_interval=2).spill_write
                  for i in range(1, 6)]
        self.assertEqual(spills, [0, 4 * strip_rows, 0, 4 * strip_rows, 2 * strip_rows])

    def test_xcache_prefix_leaves_the_devices(self):
        spec = make_spec(max_output=4)
        full = traffic_closed_form(spec, Scheme.ANS_WB_X, 1, xcache_tokens=spec.context)
        self.assertEqual(full.csd_internal_read, 0)
        none = traffic_closed_form(spec, Scheme.ANS_WB_X, 1, xcache_tokens=0)
        self.assertEqual(none, traffic_closed_form(spec, Scheme.ANS_WB, 1))

    def test_iteration_range(self):
        with self.assertRaises(DomainError):
            traffic_closed_form(make_spec(), Scheme.ANS, 4)


class PresetTest(SimpleTestCase):

    def test_presets_loaded_at_startup(self):
        topology = get_topology('csd_server')
        self.assertEqual(topology.num_csds, 16)
        self.assertEqual(topology.bw_ssd_read, 3.2e9)
        self.assertEqual(topology.bw_host_interconnect, 10e9)
        self.assertEqual(get_topology().name, 'csd_server')
        self.assertEqual(get_workload('opt30b_16k').prompt_len, 16384)
        self.assertEqual(get_topology('host_memory').kv_residency, 'memory')

    def test_unknown_preset(self):
        with self.assertRaises(PresetNotFound):
            get_topology('mainframe')
        with self.assertRaises(PresetNotFound):
            get_workload('gpt5')

    def test_rates_must_be_positive(self):
        data = get_topology('desk').as_dict()
        data['bw_ssd_write'] = 0
        serializer = TopologySerializer(data=data)
        self.assertFalse(serializer.is_valid())
        self.assertIn('bw_ssd_write', serializer.errors)


class SimulateTimingTest(SimpleTestCase):

    def setUp(self):
        self.server = get_topology('csd_server')
        self.long = get_workload('opt30b_16k')
        self.short = get_workload('opt30b_short')

    def throughput(self, scheme, devices, spec=None, **kwargs):
        return simulate_timing(spec or self.long, self.server, scheme, raid_devices=devices,
                               **kwargs).tokens_per_second

    def test_components_sum_to_total(self):
        for scheme in list(FUNCTIONAL_SCHEMES) + [Scheme.KV_IN_HOST]:
            report = simulate_timing(get_workload('toy'), get_topology('desk'), scheme)
            self.assertAlmostEqual(sum(report.breakdown.values()), report.total_seconds,
                                   delta=1e-9 * report.total_seconds)
            spec = get_workload('toy')
            self.assertAlmostEqual(report.tokens_per_second, spec.batch * spec.max_output / report.total_seconds)
            for stage in report.iterations:
                self.assertIn(stage.bottleneck, COMPONENTS)

    def test_single_token_has_no_decode(self):
        report = simulate_timing(make_spec(max_output=1), self.server, Scheme.ANS_WB)
        self.assertEqual(report.decode_seconds, 0)
        self.assertEqual(len(report.iterations), 1)
        self.assertEqual(len(iteration_rows(report)), 2)

    def test_writeback_leaves_the_critical_path(self):
        for topology in (self.server, get_topology('desk')):
            for spec in (self.short, get_workload('toy')):
                ans = simulate_timing(spec, topology, Scheme.ANS)
                wb = simulate_timing(spec, topology, Scheme.ANS_WB)
                self.assertLess(wb.decode_seconds, ans.decode_seconds)
                self.assertEqual(wb.breakdown['writeback'], 0)
                self.assertGreater(ans.breakdown['writeback'], 0)
                self.assertGreater(wb.hidden_writeback_seconds, 0)

    def test_writeback_resend_costs_on_a_host_bound_link(self):
        # pending rows cross the host link once per step until they spill
        narrow = get_topology('desk').with_overrides(bw_host_interconnect=1e3)
        spec = get_workload('toy')
        ans = simulate_timing(spec, narrow, Scheme.ANS, spill_interval=4)
        wb = simulate_timing(spec, narrow, Scheme.ANS_WB, spill_interval=4)
        self.assertEqual(wb.breakdown['writeback'], 0)
        self.assertGreater(wb.decode_seconds, ans.decode_seconds)
        per_step = [traffic_closed_form(spec, Scheme.ANS_WB, i, spill_interval=4).host_interconnect()
                    for i in range(1, spec.max_output)]
        plain = traffic_closed_form(spec, Scheme.ANS, 1).host_interconnect()
        self.assertEqual(min(per_step), plain)
        self.assertGreater(max(per_step), plain)

    def test_raid_saturates_while_near_storage_scales(self):
        baseline = self.throughput(Scheme.BASELINE_MEM, 16) / self.throughput(Scheme.BASELINE_MEM, 4)
        ans = self.throughput(Scheme.ANS, 16) / self.throughput(Scheme.ANS, 4)
        self.assertLessEqual(baseline, 1.05)
        self.assertGreaterEqual(ans, 3.0)
        beyond_three = self.throughput(Scheme.BASELINE_MEM, 4) / self.throughput(Scheme.BASELINE_MEM, 3)
        self.assertLess(beyond_three, 1.10)

    def test_raid_speedup_is_capped_by_host_link(self):
        single = self.throughput(Scheme.BASELINE_MEM, 1)
        cap = self.server.bw_host_interconnect / self.server.bw_ssd_read
        for devices in (2, 4, 8, 32):
            self.assertLessEqual(self.throughput(Scheme.BASELINE_MEM, devices) / single, cap)

    def test_kv_io_dominates_the_baseline(self):
        report = simulate_timing(self.long, self.server, Scheme.BASELINE_MEM)
        self.assertGreater(bottleneck_share(report), 0.80)

    def test_kv_in_host_memory_is_not_io_bound(self):
        report = simulate_timing(self.short, get_topology('host_memory'), Scheme.BASELINE_MEM)
        self.assertLess(bottleneck_share(report), 0.2)
        for scheme in FUNCTIONAL_SCHEMES:
            share = bottleneck_share(simulate_timing(get_workload('toy'), get_topology('desk'), scheme))
            self.assertTrue(0.0 <= share <= 1.0)

    def test_speedup_band(self):
        baseline = self.throughput(Scheme.BASELINE_MEM, 16)
        combined = self.throughput(Scheme.ANS_WB_X, 16)
        self.assertGreaterEqual(combined / baseline, 2.0)
        self.assertLessEqual(combined / baseline, 3.5)

    def test_model_size_sensitivity(self):
        names = ('opt13b_16k', 'opt30b_16k', 'opt66b_16k', 'opt175b_16k')
        self.assertEqual([get_workload(name).hidden for name in names], [5120, 7168, 9216, 12288])
        for scheme in (Scheme.BASELINE_MEM, Scheme.ANS_WB_X):
            rates = [self.throughput(scheme, 16, spec=get_workload(name)) for name in names]
            self.assertEqual(rates, sorted(rates, reverse=True), scheme)
            self.assertEqual(len(set(rates)), len(rates), scheme)
        for name in names:
            spec = get_workload(name)
            self.assertGreater(self.throughput(Scheme.ANS_WB_X, 16, spec=spec),
                               self.throughput(Scheme.BASELINE_MEM, 16, spec=spec), name)

    def test_xcache_monotone_in_budget(self):
        rates = [self.throughput(Scheme.ANS_WB_X, 16, host_bytes_free=budget)
                 for budget in (0, 16e9, 64e9, 128e9, 256e9, 512e9)]
        self.assertEqual(rates, sorted(rates))
        self.assertGreater(rates[-1], rates[0])
        self.assertEqual(rates[0], self.throughput(Scheme.ANS_WB, 16))

    def test_faster_links_never_slow_a_stage(self):
        spec = get_workload('toy')
        for name in RATE_FIELDS:
            faster = self.server.with_overrides(**{name: 2 * getattr(self.server, name)})
            for scheme in (Scheme.BASELINE_MEM, Scheme.ANS, Scheme.ANS_WB):
                before = simulate_timing(spec, self.server, scheme).iterations
                after = simulate_timing(spec, faster, scheme).iterations
                for old, new in zip(before, after):
                    self.assertLessEqual(new.seconds, old.seconds, f"{scheme} with faster {name}")
            for scheme in (Scheme.ANS_WB_X, Scheme.KV_IN_HOST):
                self.assertLessEqual(simulate_timing(spec, faster, scheme).decode_seconds,
                                     simulate_timing(spec, self.server, scheme).decode_seconds * (1 + 1e-12))

    def test_longer_prompts_never_decode_faster(self):
        for scheme in (Scheme.BASELINE_MEM, Scheme.ANS, Scheme.ANS_WB):
            times = [simulate_timing(make_spec(prompt_len=s, heads=8, head_dim=64), self.server, scheme).decode_seconds
                     for s in (16, 256, 4096)]
            self.assertEqual(times, sorted(times))

    def test_weights_on_ssd_cost_link_time(self):
        resident = self.server.with_overrides(weight_residency=0.5)
        plain = simulate_timing(self.short, self.server, Scheme.ANS_WB)
        offloaded = simulate_timing(self.short, resident, Scheme.ANS_WB)
        self.assertGreater(offloaded.total_seconds, plain.total_seconds)

    def test_iteration_rows(self):
        report = simulate_timing(get_workload('toy'), get_topology('desk'), Scheme.ANS)
        rows = iteration_rows(report)
        self.assertEqual(len(rows), 8 + 1)
        self.assertEqual(rows[0]['phase'], 'prefill')
        self.assertEqual(rows[-1]['phase'], 'total')
        self.assertAlmostEqual(rows[-1]['seconds'], sum(row['seconds'] for row in rows[:-1]))

    def test_needs_a_device(self):
        with self.assertRaises(DomainError):
            simulate_timing(make_spec(), self.server, Scheme.ANS, raid_devices=0)
