import numpy as np
from django.test import SimpleTestCase

from kv_store.layout import ModelSpec
from numerics.exceptions import ShapeError
from numerics.kernels import host_matmul, to_half
from perfmodel.ledger import TrafficLedger
from xcache.exceptions import XCacheConflict, XCacheRangeError
from xcache.partition import partition_budget, regenerate_kv, store_x


def make_spec(**overrides):
    fields = dict(layers=2, heads=2, head_dim=8, batch=1, prompt_len=4, max_output=4)
    fields.update(overrides)
    return ModelSpec(**fields)


class PartitionBudgetTest(SimpleTestCase):

    def test_zero_budget(self):
        self.assertEqual(partition_budget(make_spec(), 0).cached_tokens, 0)

    def test_budget_arithmetic(self):
        self.assertEqual(partition_budget(make_spec(), 256).cached_tokens, 4)
        # the batch dimension multiplies the per-token footprint
        self.assertEqual(partition_budget(make_spec(batch=2), 256).cached_tokens, 2)

    def test_capped_at_context(self):
        self.assertEqual(partition_budget(make_spec(), 10 ** 9).cached_tokens, 8)

    def test_monotone_in_budget(self):
        spec = make_spec(batch=3)
        sizes = [partition_budget(spec, budget).cached_tokens for budget in range(0, 4000, 37)]
        self.assertEqual(sizes, sorted(sizes))

    def test_negative_budget(self):
        with self.assertRaises(ValueError):
            partition_budget(make_spec(), -1)


class StoreAndRegenerateTest(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.spec = make_spec()
        self.ledger = TrafficLedger()
        self.part = partition_budget(self.spec, 256, ledger=self.ledger)
        self.identity = to_half(np.eye(16))

    def test_identity_projection_returns_x(self):
        rows = to_half(self.rng.standard_normal((4, 16)))
        for token in range(4):
            store_x(self.part, 1, token, rows[token])
        keys, values = regenerate_kv(self.part, 1, self.identity, self.identity)
        self.assertEqual(keys.shape, (1, 2, 4, 8))
        for head in range(2):
            np.testing.assert_array_equal(keys[0, head], rows[:, head * 8:(head + 1) * 8])
            np.testing.assert_array_equal(values[0, head], rows[:, head * 8:(head + 1) * 8])

    def test_single_row_against_float64(self):
        x = to_half(self.rng.standard_normal(16))
        w_k = to_half(self.rng.uniform(-0.1, 0.1, (16, 16)))
        w_v = to_half(self.rng.uniform(-0.1, 0.1, (16, 16)))
        store_x(self.part, 0, 0, x)
        keys, values = regenerate_kv(self.part, 0, w_k, w_v)
        expected = x.astype(np.float64) @ w_k.astype(np.float64)
        np.testing.assert_allclose(keys[0, :, 0].reshape(-1), expected, atol=2 ** -10, rtol=2 ** -10)
        self.assertEqual(values.reshape(-1).tobytes(), host_matmul(x[None, :], w_v).reshape(-1).tobytes())

    def test_regeneration_matches_prefill_projection(self):
        x = to_half(self.rng.standard_normal((4, 16)))
        w_k = to_half(self.rng.uniform(-0.1, 0.1, (16, 16)))
        for token in range(4):
            store_x(self.part, 0, token, x[token])
        keys, _ = regenerate_kv(self.part, 0, w_k, w_k, tokens=4)
        prefill = host_matmul(x, w_k).reshape(4, 2, 8).transpose(1, 0, 2)
        self.assertEqual(keys[0].tobytes(), np.ascontiguousarray(prefill).tobytes())

    def test_range(self):
        with self.assertRaises(XCacheRangeError):
            store_x(self.part, 0, 4, np.zeros(16))
        with self.assertRaises(XCacheRangeError):
            regenerate_kv(self.part, 0, self.identity, self.identity)

    def test_host_bytes_are_half_of_kv(self):
        for token in range(4):
            store_x(self.part, 0, token, self.rng.standard_normal(16))
        self.assertEqual(self.part.host_bytes(0), 4 * 2 * 8 * 2)
        self.assertEqual(2 * self.part.host_bytes(0), self.part.kv_equivalent_bytes(4))
        self.assertEqual(self.part.host_bytes(1), 0)
        self.assertEqual(self.ledger.totals.host_mem_traffic, 4 * 32)

    def test_store_is_write_once(self):
        row = to_half(self.rng.standard_normal(16))
        store_x(self.part, 0, 2, row)
        store_x(self.part, 0, 2, row)
        self.assertEqual(self.ledger.totals.host_mem_traffic, 32)
        with self.assertRaises(XCacheConflict):
            store_x(self.part, 0, 2, row + 1)

    def test_gap_limits_regeneration(self):
        store_x(self.part, 0, 0, np.ones(16))
        store_x(self.part, 0, 2, np.ones(16))
        self.assertEqual(self.part.stored_tokens(0), 1)
        keys, _ = regenerate_kv(self.part, 0, self.identity, self.identity)
        self.assertEqual(keys.shape[2], 1)

    def test_shapes_checked(self):
        with self.assertRaises(ShapeError):
            store_x(self.part, 0, 0, np.zeros(15))
        store_x(self.part, 0, 0, np.zeros(16))
        with self.assertRaises(ShapeError):
            regenerate_kv(self.part, 0, np.eye(8), np.eye(16))
