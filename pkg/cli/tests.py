import csv
import io
import tempfile
from pathlib import Path

import yaml
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from rest_framework import serializers

from cli.experiments import evaluate_point, evaluate_sweep
from cli.reports import HEADER, ITERATION_HEADER, MATCH, NOT_APPLICABLE, format_cell, render_csv
from cli.serializers import parse_config
from engine.schemes import Scheme
from perfmodel.presets import get_topology, get_workload
from perfmodel.timing import free_host_bytes

CONFIG_DIR = Path(settings.BASE_DIR) / 'cli' / 'configs'


def toy_config(**overrides):
    data = {
        'name': 'toy',
        'model': 'toy',
        'topology': 'desk',
        'num_csds': 4,
        'host_budget_bytes': 3072,
        'functional': True,
    }
    data.update(overrides)
    return data


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        directory = tempfile.TemporaryDirectory()
        self.addCleanup(directory.cleanup)
        self.directory = Path(directory.name)

    def write_config(self, data, name='config.yaml'):
        path = self.directory / name
        path.write_text(data if isinstance(data, str) else yaml.safe_dump(data))
        return str(path)

    def call(self, command, data=None, **options):
        out = io.StringIO()
        if data is not None:
            options['config'] = self.write_config(data)
        call_command(command, stdout=out, **options)
        return out.getvalue()

    def rows(self, text):
        return list(csv.DictReader(io.StringIO(text)))


class ConfigSerializerTest(SimpleTestCase):

    def test_presets_resolve(self):
        config = parse_config(toy_config())
        self.assertEqual(config.spec, get_workload('toy'))
        self.assertEqual(config.topology, get_topology('desk'))
        self.assertEqual(config.schemes, (Scheme.BASELINE_MEM, Scheme.ANS, Scheme.ANS_WB, Scheme.ANS_WB_X))
        self.assertEqual(config.devices, 4)
        self.assertEqual(config.interval, settings.DEFAULT_SPILL_INTERVAL)

    def test_inline_model_and_topology(self):
        topology = dict(get_topology('desk').as_dict(), name='bench', bw_host_interconnect='8e9')
        config = parse_config(toy_config(
            model={'layers': 1, 'heads': 2, 'head_dim': 8, 'batch': 1, 'prompt_len': 4, 'max_output': 3},
            topology=topology,
            num_csds=None,
        ))
        self.assertEqual(config.spec.hidden, 16)
        self.assertEqual(config.topology.bw_host_interconnect, 8e9)
        self.assertEqual(config.devices, 4)

    def test_default_budget_is_what_the_weights_leave(self):
        config = parse_config(toy_config(host_budget_bytes=None))
        self.assertEqual(config.budget, free_host_bytes(config.spec, config.topology))

    def test_rejections(self):
        cases = [
            ('model', toy_config(model='gpt9')),
            ('topology', toy_config(topology={'num_csds': 2})),
            ('schemes', toy_config(schemes=[])),
            ('schemes', toy_config(schemes=['kv_in_host'])),
            ('sweep', toy_config(sweep={'batch': [1], 'num_csds': [1], 'max_output': [2]})),
            ('sweep', toy_config(sweep={'batch': []})),
            ('sweep', toy_config(sweep={'heads': [1, 2]})),
            ('sweep', toy_config(sweep={'batch': [1.5]})),
            ('sweep', toy_config(sweep={'weight_residency': [1.5]})),
            ('num_csds', toy_config(num_csds=0)),
        ]
        for field, data in cases:
            with self.assertRaises(serializers.ValidationError) as cm:
                parse_config(data)
            self.assertIn(field, cm.exception.detail, data)

    def test_dict_round_trip(self):
        config = parse_config(toy_config(functional=False, schemes=['ans', 'kv_in_host'],
                                         sweep={'num_csds': [4, 1, 4], 'weight_residency': [0.5]}))
        self.assertEqual(config.sweep, (('num_csds', (1, 4)), ('weight_residency', (0.5,))))
        self.assertEqual(parse_config(config.to_dict()), config)

    def test_sweep_points_in_axis_order(self):
        config = parse_config(toy_config(sweep={'batch': [2, 1], 'num_csds': [4, 1]}))
        points = [(point.spec.batch, point.devices) for point in config.points()]
        self.assertEqual(points, [(1, 1), (1, 4), (2, 1), (2, 4)])
        self.assertTrue(all(point.sweep == () for point in config.points()))


class ReportFormatTest(SimpleTestCase):

    def test_cells(self):
        self.assertEqual(format_cell(1 / 3), '0.333333')
        self.assertEqual(format_cell(123456789.0), '1.23457e+08')
        self.assertEqual(format_cell(0.0), '0')
        self.assertEqual(format_cell(4096), '4096')
        self.assertEqual(format_cell(NOT_APPLICABLE), 'n/a')

    def test_header_first_and_newline_terminated(self):
        text = render_csv(ITERATION_HEADER, [dict.fromkeys(ITERATION_HEADER, 1)])
        self.assertEqual(text.splitlines()[0], ','.join(ITERATION_HEADER))
        self.assertTrue(text.endswith('1\n'))
        self.assertNotIn('\r', text)


class RunCommandTest(CommandTestCase):

    def test_toy_config_all_schemes_match(self):
        rows = self.rows(self.call('run', data=toy_config()))
        self.assertEqual([row['scheme'] for row in rows], ['baseline_mem', 'ans', 'ans_wb', 'ans_wb_x'])
        self.assertEqual({row['verdict'] for row in rows}, {MATCH})
        self.assertEqual(list(rows[0]), list(HEADER))
        self.assertEqual(rows[3]['xcache_tokens'], '4')
        self.assertEqual(rows[1]['spill_write'], '0')
        self.assertNotEqual(rows[2]['spill_write'], '0')

    def test_shipped_toy_config(self):
        out = self.directory / 'toy.csv'
        call_command('run', config=str(CONFIG_DIR / 'toy.yaml'), out=str(out), stdout=io.StringIO())
        self.assertEqual({row['verdict'] for row in self.rows(out.read_text())}, {MATCH})

    def test_output_is_byte_deterministic(self):
        first = self.call('run', data=toy_config())
        second = self.call('run', data=toy_config())
        self.assertEqual(first, second)
        modelled = self.call('run', data=toy_config(functional=False, schemes=['ans_wb_x', 'kv_in_host']))
        self.assertEqual(modelled, self.call('run', data=toy_config(functional=False, schemes=['ans_wb_x', 'kv_in_host'])))
        self.assertEqual({row['verdict'] for row in self.rows(modelled)}, {NOT_APPLICABLE})

    def test_seed_flag_overrides_config(self):
        seeded = self.call('run', data=toy_config(seed=7))
        overridden = self.call('run', data=toy_config(seed=0), seed=7)
        self.assertEqual(seeded, overridden)

    def test_single_token_has_zero_decode(self):
        model = dict(get_workload('toy').as_dict(), max_output=1)
        rows = self.rows(self.call('run', data=toy_config(model=model)))
        for row in rows:
            self.assertEqual(row['decode_seconds'], '0')
            self.assertEqual(row['csd_internal_read'], '0')
            self.assertEqual(row['verdict'], MATCH)

    def test_malformed_config_exits_2_without_csv(self):
        out = self.directory / 'never.csv'
        for text in ('model: [toy', 'model: toy\nschemes: [warp]\n', '- just\n- a list\n'):
            with self.assertRaises(CommandError) as cm:
                call_command('run', config=self.write_config(text), out=str(out), stdout=io.StringIO())
            self.assertEqual(cm.exception.returncode, 2)
        with self.assertRaises(CommandError) as cm:
            call_command('run', config=str(self.directory / 'missing.yaml'), out=str(out))
        self.assertEqual(cm.exception.returncode, 2)
        self.assertFalse(out.exists())

    @override_settings(KV_DEVICE_CAPACITY_BYTES=512)
    def test_storage_errors_exit_3(self):
        with self.assertRaises(CommandError) as cm:
            self.call('run', data=toy_config())
        self.assertEqual(cm.exception.returncode, 3)


class SweepCommandTest(CommandTestCase):

    def test_raid_width_against_csd_count(self):
        rows = self.rows(self.call('sweep', config=str(CONFIG_DIR / 'raid_scaling.yaml')))
        self.assertEqual(len(rows), 16)
        rate = {(row['scheme'], int(row['num_csds'])): float(row['tokens_per_second']) for row in rows}
        self.assertLessEqual(rate['baseline_mem', 16] / rate['baseline_mem', 4], 1.05)
        self.assertGreaterEqual(rate['ans', 16] / rate['ans', 4], 3.0)
        self.assertEqual([int(row['num_csds']) for row in rows[::2]], [1, 2, 3, 4, 6, 8, 12, 16])

    def test_memory_budget_is_monotone(self):
        rows = self.rows(self.call('sweep', data={
            'model': 'opt30b_16k',
            'topology': 'csd_server',
            'schemes': ['ans_wb_x', 'kv_in_host'],
            'num_csds': 16,
            'sweep': {'host_budget_bytes': [0, 32e9, 128e9, 512e9]},
        }))
        for scheme in ('ans_wb_x', 'kv_in_host'):
            rates = [float(row['tokens_per_second']) for row in rows if row['scheme'] == scheme]
            self.assertEqual(len(rates), 4)
            self.assertEqual(rates, sorted(rates))

    def test_single_point_sweep_matches_run(self):
        data = toy_config(functional=False, schemes=['baseline_mem', 'ans_wb'])
        single = self.call('run', data=data)
        swept = self.call('sweep', data=dict(data, sweep={'batch': [get_workload('toy').batch]}))
        self.assertEqual(single, swept)

    def test_jobs_dispatch_through_celery_keeps_order(self):
        data = toy_config(sweep={'num_csds': [3, 1], 'max_output': [2, 4]})
        self.assertEqual(self.call('sweep', data=data, jobs=1), self.call('sweep', data=data, jobs=3))

    def test_echoed_row_reproduces_itself(self):
        config = parse_config(toy_config(functional=False, schemes=['ans_wb_x'],
                                         host_budget_bytes=None, sweep={'weight_residency': [0.0, 1.0]}))
        for row in evaluate_sweep(config):
            self.assertEqual(evaluate_point(config.at(**row.overrides())), [row])

    def test_needs_an_axis(self):
        with self.assertRaises(CommandError) as cm:
            self.call('sweep', data=toy_config())
        self.assertEqual(cm.exception.returncode, 2)


class ReportCommandTest(CommandTestCase):

    def test_iteration_rows_per_scheme(self):
        rows = self.rows(self.call('report', data=toy_config(schemes=['ans', 'ans_wb'], functional=False)))
        spec = get_workload('toy')
        self.assertEqual(len(rows), 2 * (spec.max_output + 1))
        self.assertEqual(list(rows[0]), list(ITERATION_HEADER))
        self.assertEqual([row['phase'] for row in rows[:spec.max_output + 1]],
                         ['prefill'] + ['decode'] * (spec.max_output - 1) + ['total'])


class ValidateCommandTest(CommandTestCase):

    def test_fresh_checkout_passes(self):
        out = self.call('validate')
        self.assertIn('all 7 suites passed', out)
        self.assertIn('traffic_ratio: ok', out)

    @override_settings(KV_FAULT_SPILL_MISALIGN=1)
    def test_misaligned_spill_fails_alignment_suite(self):
        with self.assertRaises(CommandError) as cm:
            self.call('validate', suites=['direct_io_alignment', 'spill_count'])
        self.assertEqual(cm.exception.returncode, 1)
        self.assertIn('direct_io_alignment', str(cm.exception))
