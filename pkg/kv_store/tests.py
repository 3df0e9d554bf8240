import tempfile

import numpy as np
from django.test import SimpleTestCase, override_settings

from kv_store.backends import FileBackend, MemoryBackend, make_backend
from kv_store.exceptions import CapacityError, DirectIOError, ProtocolError, SpecError, StripNotFound
from kv_store.layout import ModelSpec, plan_shards
from kv_store.signals import AlignmentAudit
from kv_store.storage import (
    KvEntry,
    WritebackBuffer,
    append_decode_entry,
    read_strip_for_attention,
    spill,
    write_entry,
    write_prefill,
)
from numerics.kernels import to_half
from perfmodel.ledger import TrafficLedger


def make_spec(**overrides):
    fields = dict(layers=1, heads=2, head_dim=8, batch=2, prompt_len=4, max_output=4)
    fields.update(overrides)
    return ModelSpec(**fields)


def random_kv(rng, spec, tokens=None):
    shape = (spec.batch, spec.heads, spec.prompt_len if tokens is None else tokens, spec.head_dim)
    return to_half(rng.standard_normal(shape)), to_half(rng.standard_normal(shape))


class Mirror:
    """
    in-memory copy of every strip, the oracle for round trips
    """

    def __init__(self):
        self.keys = {}
        self.values = {}

    def extend(self, strip, keys, values):
        self.keys.setdefault(strip, []).extend(list(keys))
        self.values.setdefault(strip, []).extend(list(values))

    def assert_matches(self, case, shards, buf):
        for strip in self.keys:
            keys, values, valid_len = read_strip_for_attention(shards, buf, *strip)
            case.assertEqual(valid_len, len(self.keys[strip]))
            case.assertEqual(keys.data.tobytes(), np.stack(self.keys[strip]).tobytes())
            case.assertEqual(values.data.tobytes(), np.stack(self.values[strip]).tobytes())


class ModelSpecTest(SimpleTestCase):

    def test_derived_sizes(self):
        spec = make_spec(heads=4, head_dim=16, batch=3)
        self.assertEqual(spec.hidden, 64)
        self.assertEqual(spec.context, 8)
        self.assertEqual(spec.row_bytes, 32)
        self.assertEqual(spec.strips, 12)

    def test_counts_must_be_positive(self):
        with self.assertRaises(SpecError):
            make_spec(prompt_len=0)
        with self.assertRaises(SpecError):
            make_spec(elem_bytes=4)


class PlanShardsTest(SimpleTestCase):

    def test_batch_dimension_is_striped_first(self):
        shards = plan_shards(make_spec(batch=4, heads=2), 4, MemoryBackend())
        for batch in range(4):
            self.assertEqual(shards.strip(0, batch, 0)[0].device_id, batch)
        # head 1 only starts once every batch index of head 0 is placed
        self.assertEqual(shards.strip(0, 0, 1)[0].device_id, 0)

    def test_single_device_extents_do_not_overlap(self):
        shards = plan_shards(make_spec(layers=2), 1, MemoryBackend())
        regions = sorted((e.byte_offset, e.byte_offset + e.reserved_bytes)
                         for pair in shards.assignment.values() for e in pair)
        self.assertTrue(all(e.device_id == 0 for pair in shards.assignment.values() for e in pair))
        for (_, end), (start, _) in zip(regions, regions[1:]):
            self.assertLessEqual(end, start)
        self.assertTrue(all(start % 512 == 0 for start, _ in regions))

    def test_extent_length_follows_preallocation(self):
        shards = plan_shards(make_spec(), 2, MemoryBackend())
        k_extent, v_extent = shards.strip(0, 1, 1)
        self.assertEqual(k_extent.byte_length, 128)
        self.assertEqual(k_extent.capacity_tokens, 8)
        self.assertEqual(v_extent.byte_offset, k_extent.byte_offset + 512)

    def test_load_balance(self):
        for layers, heads, batch, csds in [(1, 2, 3, 4), (3, 5, 2, 7), (2, 8, 8, 16), (4, 3, 1, 5)]:
            shards = plan_shards(make_spec(layers=layers, heads=heads, batch=batch), csds, MemoryBackend())
            counts = shards.strips_per_device()
            self.assertEqual(sum(counts), layers * heads * batch)
            self.assertLessEqual(max(counts) - min(counts), 1)

    def test_deterministic(self):
        first = plan_shards(make_spec(layers=2, batch=3), 3, MemoryBackend())
        second = plan_shards(make_spec(layers=2, batch=3), 3, MemoryBackend())
        self.assertEqual(first.assignment, second.assignment)

    def test_capacity_error(self):
        with self.assertRaises(CapacityError):
            plan_shards(make_spec(), 1, MemoryBackend(), capacity_bytes=1024)

    def test_needs_a_device(self):
        with self.assertRaises(SpecError):
            plan_shards(make_spec(), 0, MemoryBackend())

    def test_missing_strip(self):
        shards = plan_shards(make_spec(), 1, MemoryBackend())
        with self.assertRaises(StripNotFound):
            shards.strip(1, 0, 0)

    @override_settings(KV_BACKEND='memory')
    def test_backend_from_settings(self):
        self.assertIsInstance(make_backend(), MemoryBackend)
        with self.assertRaises(ValueError):
            make_backend('tape')


class WritePrefillTest(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.spec = make_spec()
        self.ledger = TrafficLedger(2)
        self.shards = plan_shards(self.spec, 2, MemoryBackend(), ledger=self.ledger)

    def test_bytes_credited_per_block(self):
        write_prefill(self.shards, 0, random_kv(self.rng, self.spec))
        self.assertEqual(self.ledger.totals.host_interconnect_write, 512)

    def test_read_back_is_bitwise(self):
        keys, values = random_kv(self.rng, self.spec)
        write_prefill(self.shards, 0, (keys, values))
        k, v, valid_len = read_strip_for_attention(self.shards, None, 0, 1, 0)
        self.assertEqual(valid_len, 4)
        self.assertEqual(k.data.tobytes(), keys[1, 0].tobytes())
        self.assertEqual(v.data.tobytes(), values[1, 0].tobytes())

    def test_shape_checked(self):
        with self.assertRaises(ValueError):
            write_prefill(self.shards, 0, random_kv(self.rng, make_spec(head_dim=4)))

    def test_overflow(self):
        with self.assertRaises(CapacityError):
            write_prefill(self.shards, 0, random_kv(self.rng, self.spec, tokens=9))

    def test_second_prefill_rejected(self):
        write_prefill(self.shards, 0, random_kv(self.rng, self.spec))
        with self.assertRaises(ProtocolError):
            write_prefill(self.shards, 0, random_kv(self.rng, self.spec))


class WritebackTest(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.spec = make_spec(batch=1, heads=1, head_dim=128, prompt_len=4, max_output=8)
        self.ledger = TrafficLedger(1)
        self.backend = MemoryBackend()
        self.shards = plan_shards(self.spec, 1, self.backend, ledger=self.ledger)
        write_prefill(self.shards, 0, random_kv(self.rng, self.spec))
        self.buf = WritebackBuffer(spill_interval=2, ledger=self.ledger)

    def entry(self, token_index):
        return KvEntry(0, 0, 0, token_index, self.rng.standard_normal(128), self.rng.standard_normal(128))

    def test_append_issues_no_storage_write(self):
        before = bytes(self.backend.devices[0])
        with AlignmentAudit() as audit:
            append_decode_entry(self.buf, self.entry(4))
        self.assertEqual(audit.writes, [])
        self.assertEqual(bytes(self.backend.devices[0]), before)
        self.assertEqual(self.buf.pending_count((0, 0, 0)), 1)

    def test_appended_row_is_visible(self):
        entry = self.entry(4)
        append_decode_entry(self.buf, entry)
        keys, values, valid_len = read_strip_for_attention(self.shards, self.buf, 0, 0, 0)
        self.assertEqual(valid_len, 5)
        self.assertEqual(keys.data[-1].tobytes(), entry.k_row.tobytes())
        self.assertEqual(values.data[-1].tobytes(), entry.v_row.tobytes())

    def test_missed_spill(self):
        append_decode_entry(self.buf, self.entry(4))
        append_decode_entry(self.buf, self.entry(5))
        with self.assertRaises(ProtocolError):
            append_decode_entry(self.buf, self.entry(6))

    def test_spill_is_one_sector_per_region(self):
        append_decode_entry(self.buf, self.entry(4))
        append_decode_entry(self.buf, self.entry(5))
        with AlignmentAudit() as audit:
            spilled = spill(self.buf, self.shards)
        self.assertEqual(audit.sizes('spill'), [512, 512])
        self.assertEqual(audit.violations, [])
        self.assertEqual(spilled, 1024)
        self.assertEqual(self.buf.total_pending(), 0)
        self.assertEqual(self.shards.strip(0, 0, 0)[0].used_tokens, 6)
        self.assertEqual(self.ledger.spills, 1)
        self.assertEqual(self.ledger.totals.spill_write, 1024)

    def test_single_row_spill_is_padded(self):
        buf = WritebackBuffer(spill_interval=1)
        mirror = Mirror()
        k_extent, _ = self.shards.strip(0, 0, 0)
        rows = read_strip_for_attention(self.shards, None, 0, 0, 0)
        mirror.extend((0, 0, 0), rows[0].data, rows[1].data)
        with AlignmentAudit() as audit:
            for token in (4, 5, 6):
                entry = self.entry(token)
                append_decode_entry(buf, entry)
                spill(buf, self.shards)
                mirror.extend((0, 0, 0), [entry.k_row], [entry.v_row])
        self.assertEqual(audit.sizes('spill'), [512] * 6)
        self.assertEqual(audit.violations, [])
        self.assertEqual(k_extent.used_tokens, 7)
        mirror.assert_matches(self, self.shards, buf)

    def test_read_skips_cached_prefix(self):
        append_decode_entry(self.buf, self.entry(4))
        keys, _, valid_len = read_strip_for_attention(self.shards, self.buf, 0, 0, 0, from_token=3)
        self.assertEqual(valid_len, 5)
        self.assertEqual(keys.rows, 2)
        self.assertEqual(self.ledger.totals.csd_internal_read, 2 * 256)

    def test_spill_out_of_order_rejected(self):
        append_decode_entry(self.buf, self.entry(5))
        with self.assertRaises(ProtocolError):
            spill(self.buf, self.shards)

    @override_settings(KV_FAULT_SPILL_MISALIGN=1)
    def test_misaligned_spill_rejected(self):
        append_decode_entry(self.buf, self.entry(4))
        with AlignmentAudit() as audit, self.assertRaises(DirectIOError):
            spill(self.buf, self.shards)
        self.assertEqual(len(audit.violations), 1)


class FlakyBackend(MemoryBackend):
    """
    memory devices that fail every write once `allowed` is used up, None never fails
    """

    def __init__(self, allowed):
        super().__init__()
        self.allowed = allowed

    def _write(self, device_id, offset, payload):
        if self.allowed is not None:
            if not self.allowed:
                raise DirectIOError(f"device {device_id} rejected a write at {offset}")
            self.allowed -= 1
        super()._write(device_id, offset, payload)


class FailedSpillTest(SimpleTestCase):

    def test_partial_spill_changes_nothing_and_can_be_retried(self):
        rng = np.random.default_rng(17)
        spec = make_spec(batch=1, heads=2, head_dim=128, prompt_len=4, max_output=4)
        ledger = TrafficLedger(1)
        backend = FlakyBackend(allowed=None)
        shards = plan_shards(spec, 1, backend, ledger=ledger)
        keys, values = random_kv(rng, spec)
        write_prefill(shards, 0, (keys, values))
        mirror = Mirror()
        for head in range(2):
            mirror.extend((0, 0, head), keys[0, head], values[0, head])
        buf = WritebackBuffer(spill_interval=2, ledger=ledger)
        for token in (4, 5):
            for head in range(2):
                entry = KvEntry(0, 0, head, token, rng.standard_normal(128), rng.standard_normal(128))
                append_decode_entry(buf, entry)
                mirror.extend((0, 0, head), [entry.k_row], [entry.v_row])
        writes = ledger.storage_writes

        # the K and V writes of the first strip land, the second strip fails
        backend.allowed = 2
        with self.assertRaises(DirectIOError):
            spill(buf, shards)
        self.assertEqual([shards.strip(0, 0, head)[0].used_tokens for head in range(2)], [4, 4])
        self.assertEqual([shards.strip(0, 0, head)[1].used_tokens for head in range(2)], [4, 4])
        self.assertEqual(buf.total_pending(), 4)
        self.assertEqual(ledger.spills, 0)
        self.assertEqual(ledger.totals.spill_write, 0)
        self.assertEqual(ledger.storage_writes, writes)
        mirror.assert_matches(self, shards, buf)

        backend.allowed = None
        self.assertEqual(spill(buf, shards), 4 * 512)
        self.assertEqual(buf.total_pending(), 0)
        self.assertEqual(ledger.spills, 1)
        mirror.assert_matches(self, shards, buf)


class WriteEntryTest(SimpleTestCase):

    def test_immediate_path_round_trip(self):
        rng = np.random.default_rng(3)
        spec = make_spec(head_dim=16, max_output=6)
        ledger = TrafficLedger(3)
        shards = plan_shards(spec, 3, MemoryBackend(), ledger=ledger)
        keys, values = random_kv(rng, spec)
        write_prefill(shards, 0, (keys, values))
        mirror = Mirror()
        for batch in range(spec.batch):
            for head in range(spec.heads):
                mirror.extend((0, batch, head), keys[batch, head], values[batch, head])
        with AlignmentAudit() as audit:
            for token in range(4, 10):
                for batch in range(spec.batch):
                    for head in range(spec.heads):
                        entry = KvEntry(0, batch, head, token, rng.standard_normal(16), rng.standard_normal(16))
                        write_entry(shards, entry)
                        mirror.extend(entry.strip, [entry.k_row], [entry.v_row])
        self.assertEqual(audit.violations, [])
        self.assertEqual(set(audit.sizes('entry')), {512})
        self.assertEqual(ledger.totals.csd_internal_write, 6 * 4 * 2 * 32)
        self.assertEqual(sum(ledger.csd_internal_write), ledger.totals.csd_internal_write)
        mirror.assert_matches(self, shards, None)
        with self.assertRaises(CapacityError):
            write_entry(shards, KvEntry(0, 0, 0, 10, np.zeros(16), np.zeros(16)))


class RoundTripTest(SimpleTestCase):

    def run_sequence(self, backend, seed):
        rng = np.random.default_rng(seed)
        spec = make_spec(layers=2, heads=int(rng.integers(1, 4)), batch=int(rng.integers(1, 4)),
                         head_dim=int(rng.choice([8, 24, 64])), prompt_len=int(rng.integers(1, 9)),
                         max_output=9)
        interval = int(rng.integers(1, 4))
        shards = plan_shards(spec, int(rng.integers(1, 5)), backend)
        buf = WritebackBuffer(spill_interval=interval)
        mirror = Mirror()
        for layer in range(spec.layers):
            keys, values = random_kv(rng, spec)
            write_prefill(shards, layer, (keys, values))
            for batch in range(spec.batch):
                for head in range(spec.heads):
                    mirror.extend((layer, batch, head), keys[batch, head], values[batch, head])
        with AlignmentAudit() as audit:
            for step in range(8):
                token = spec.prompt_len + step
                for strip in sorted(shards.assignment):
                    entry = KvEntry(*strip, token, rng.standard_normal(spec.head_dim),
                                    rng.standard_normal(spec.head_dim))
                    append_decode_entry(buf, entry)
                    mirror.extend(strip, [entry.k_row], [entry.v_row])
                if buf.end_iteration():
                    spill(buf, shards)
                mirror.assert_matches(self, shards, buf)
            spill(buf, shards)
        self.assertEqual(audit.violations, [])
        mirror.assert_matches(self, shards, buf)
        shards.close()

    def test_memory_backend(self):
        for seed in range(6):
            self.run_sequence(MemoryBackend(), seed)

    def test_file_backend(self):
        with tempfile.TemporaryDirectory() as directory:
            for seed in range(3):
                backend = FileBackend(directory)
                self.run_sequence(backend, seed)
                self.assertTrue(backend.path(0).exists())
