import math

import numpy as np
from django.test import SimpleTestCase

from numerics.exceptions import ContractViolation, NumericDomainError, ShapeError
from numerics.kernels import (
    AttentionRequest,
    HalfMatrix,
    attention_accelerated,
    attention_batch,
    attention_oracle,
    gemv_blocked,
    host_matmul,
    masked_softmax,
    to_half,
    transpose_tile_inplace,
)


def replay_gemv(matrix, vector):
    """
    scalar walk over tiles in row-major order and lanes in ascending order,
    one binary16 rounding per product and per accumulation
    """
    rows, cols = matrix.shape
    out = [np.float16(0.0)] * cols
    for tile_row in range(math.ceil(rows / 32)):
        for tile_col in range(math.ceil(cols / 32)):
            for lane in range(32):
                i = tile_row * 32 + lane
                if i >= rows:
                    break
                for j in range(tile_col * 32, min(cols, tile_col * 32 + 32)):
                    product = np.float16(float(vector[i]) * float(matrix[i, j]))
                    out[j] = np.float16(float(out[j]) + float(product))
    return np.array(out, dtype=np.float16)


def random_request(rng, tokens, head_dim, valid_len=None):
    return AttentionRequest(
        query=HalfMatrix.from_array(rng.standard_normal((1, head_dim))),
        keys=HalfMatrix.from_array(rng.standard_normal((tokens, head_dim))),
        values=HalfMatrix.from_array(rng.standard_normal((tokens, head_dim))),
        valid_len=tokens if valid_len is None else valid_len,
    )


class HalfMatrixTest(SimpleTestCase):

    def test_from_array_rounds_to_half(self):
        matrix = HalfMatrix.from_array([[1.0, 1.0 / 3.0]])
        self.assertEqual(matrix.data.dtype, np.float16)
        self.assertEqual(matrix.data[0, 1], np.float16(1.0 / 3.0))
        self.assertEqual(matrix.nbytes, 4)

    def test_non_finite_rejected(self):
        with self.assertRaises(NumericDomainError):
            HalfMatrix.from_array([[np.inf, 0.0]])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            HalfMatrix(rows=2, cols=2, data=np.zeros((2, 3), dtype=np.float16))


class TransposeTileTest(SimpleTestCase):

    def test_identity_tile(self):
        tile = np.eye(32, dtype=np.float16)
        np.testing.assert_array_equal(transpose_tile_inplace(tile.copy()), np.eye(32, dtype=np.float16))

    def test_index_permutation(self):
        i, j = np.meshgrid(np.arange(32), np.arange(32), indexing='ij')
        tile = (i * 32 + j).astype(np.float16)
        np.testing.assert_array_equal(transpose_tile_inplace(tile), (j * 32 + i).astype(np.float16))

    def test_double_transpose_is_identity(self):
        rng = np.random.default_rng(3)
        original = to_half(rng.standard_normal((32, 32)))
        tile = original.copy()
        transpose_tile_inplace(transpose_tile_inplace(tile))
        self.assertEqual(tile.tobytes(), original.tobytes())

    def test_transposes_in_place(self):
        tile = to_half(np.arange(1024).reshape(32, 32) / 1024)
        result = transpose_tile_inplace(tile)
        self.assertIs(result, tile)

    def test_wrong_shape(self):
        with self.assertRaises(ShapeError):
            transpose_tile_inplace(np.zeros((32, 31), dtype=np.float16))


class GemvBlockedTest(SimpleTestCase):

    def test_identity(self):
        rng = np.random.default_rng(5)
        vector = to_half(rng.standard_normal(32))
        out = gemv_blocked(HalfMatrix.from_array(np.eye(32)), vector)
        self.assertEqual(out.tobytes(), vector.tobytes())

    def test_query_times_all_ones_keys(self):
        d, t = 40, 7
        keys = HalfMatrix.from_array(np.ones((t, d)))
        query = to_half(np.ones(d))
        out = gemv_blocked(keys, query, transpose_first=True)
        self.assertEqual(out.shape, (t,))
        expected = np.float16(np.sum(np.ones(d, dtype=np.float64)))
        np.testing.assert_array_equal(out, np.full(t, expected, dtype=np.float16))

    def test_matches_scalar_replay(self):
        rng = np.random.default_rng(11)
        matrix = to_half(rng.standard_normal((64, 96)))
        vector = to_half(rng.standard_normal(64))
        out = gemv_blocked(matrix, vector)
        self.assertEqual(out.tobytes(), replay_gemv(matrix, vector).tobytes())

    def test_transpose_path_matches_eager_transpose(self):
        rng = np.random.default_rng(12)
        for rows, cols in [(32, 32), (45, 70), (100, 9), (1, 1)]:
            matrix = to_half(rng.standard_normal((rows, cols)))
            vector = to_half(rng.standard_normal(cols))
            fused = gemv_blocked(matrix, vector, transpose_first=True)
            eager = gemv_blocked(np.ascontiguousarray(matrix.T), vector)
            self.assertEqual(fused.tobytes(), eager.tobytes())

    def test_transpose_path_leaves_input_untouched(self):
        rng = np.random.default_rng(13)
        for rows, cols in [(32, 32), (64, 32), (96, 32)]:
            matrix = to_half(rng.standard_normal((rows, cols)))
            before = matrix.copy()
            vector = to_half(rng.standard_normal(cols))
            first = gemv_blocked(matrix, vector, transpose_first=True)
            self.assertEqual(matrix.tobytes(), before.tobytes())
            self.assertEqual(first.tobytes(), gemv_blocked(matrix, vector, transpose_first=True).tobytes())

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            gemv_blocked(np.zeros((4, 5), dtype=np.float16), np.zeros(5, dtype=np.float16))

    def test_non_finite_input(self):
        vector = np.array([1.0, np.nan], dtype=np.float16)
        with self.assertRaises(NumericDomainError):
            gemv_blocked(np.ones((2, 2), dtype=np.float16), vector)


class MaskedSoftmaxTest(SimpleTestCase):

    def test_symmetric_pair(self):
        np.testing.assert_array_equal(masked_softmax([0.0, 0.0], 2), np.array([0.5, 0.5], dtype=np.float16))

    def test_masked_tail(self):
        out = masked_softmax([1.0, 2.0, 99.0], 2).astype(np.float64)
        self.assertAlmostEqual(out[0], 0.2689, delta=2 ** -8)
        self.assertAlmostEqual(out[1], 0.7311, delta=2 ** -8)
        self.assertEqual(out[2], 0.0)

    def test_single_element(self):
        np.testing.assert_array_equal(masked_softmax([3.5], 1), np.array([1.0], dtype=np.float16))

    def test_zero_valid_len(self):
        with self.assertRaises(ContractViolation):
            masked_softmax([1.0, 2.0], 0)

    def test_properties_on_random_scores(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            length = int(rng.integers(1, 4097))
            valid_len = int(rng.integers(1, length + 1))
            out = masked_softmax(to_half(rng.standard_normal(length)), valid_len)
            self.assertTrue(np.all(out >= 0))
            self.assertTrue(np.all(out[valid_len:] == 0))
            self.assertLessEqual(abs(out.astype(np.float64).sum() - 1.0), 2 ** -8)

    def test_batched_lengths(self):
        rng = np.random.default_rng(19)
        scores = to_half(rng.standard_normal((3, 50)))
        lens = np.array([1, 25, 50])
        batched = masked_softmax(scores, lens)
        for row in range(3):
            self.assertEqual(batched[row].tobytes(), masked_softmax(scores[row], int(lens[row])).tobytes())


class AttentionTest(SimpleTestCase):

    def test_single_token(self):
        rng = np.random.default_rng(23)
        req = random_request(rng, 1, 16)
        np.testing.assert_array_equal(attention_accelerated(req), req.values.data[0])
        np.testing.assert_allclose(attention_oracle(req), req.values.data[0].astype(np.float64))

    def test_uniform_scores_average_values(self):
        req = AttentionRequest(
            query=HalfMatrix.from_array(np.ones((1, 4))),
            keys=HalfMatrix.from_array(np.zeros((4, 4))),
            values=HalfMatrix.from_array(np.eye(4)),
            valid_len=4,
        )
        np.testing.assert_array_equal(attention_accelerated(req), np.full(4, 0.25, dtype=np.float16))

    def test_random_request_matches_oracle(self):
        req = random_request(np.random.default_rng(29), 100, 16)
        error = np.abs(attention_accelerated(req).astype(np.float64) - attention_oracle(req)).max()
        self.assertLessEqual(error, 2 ** -7)

    def test_fidelity_over_random_cases(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            head_dim = int(rng.choice([16, 32, 64, 128]))
            tokens = int(math.exp(rng.uniform(0.0, math.log(4096))))
            req = random_request(rng, tokens, head_dim, valid_len=int(rng.integers(1, tokens + 1)))
            error = np.abs(attention_accelerated(req).astype(np.float64) - attention_oracle(req)).max()
            worst = max(worst, error)
        self.assertLessEqual(worst, 2 ** -7)

    def test_masked_positions_carry_no_weight(self):
        rng = np.random.default_rng(31)
        req = random_request(rng, 40, 8, valid_len=10)
        values = req.values.data.copy()
        values[10:] = 100.0
        poisoned = AttentionRequest(query=req.query, keys=req.keys, values=HalfMatrix.from_array(values), valid_len=10)
        self.assertEqual(attention_accelerated(req).tobytes(), attention_accelerated(poisoned).tobytes())

    def test_deterministic(self):
        req = random_request(np.random.default_rng(37), 300, 64)
        self.assertEqual(attention_accelerated(req).tobytes(), attention_accelerated(req).tobytes())

    def test_whole_tile_keys_are_not_modified(self):
        rng = np.random.default_rng(39)
        for tokens in (32, 64):
            req = random_request(rng, tokens, 32)
            keys, values = req.keys.data.copy(), req.values.data.copy()
            first = attention_accelerated(req)
            self.assertEqual(req.keys.data.tobytes(), keys.tobytes())
            self.assertEqual(req.values.data.tobytes(), values.tobytes())
            self.assertEqual(first.tobytes(), attention_accelerated(req).tobytes())
            error = np.abs(first.astype(np.float64) - attention_oracle(req)).max()
            self.assertLessEqual(error, 2 ** -7)

    def test_batch_leaves_keys_untouched(self):
        rng = np.random.default_rng(40)
        queries = to_half(rng.standard_normal((2, 2, 32, 32)))
        keys = to_half(rng.standard_normal((2, 2, 32, 32)))
        values = to_half(rng.standard_normal((2, 2, 32, 32)))
        before = keys.copy()
        lens = np.broadcast_to(np.arange(1, 33), (2, 2, 32))
        first = attention_batch(queries, keys, values, lens, 0.25)
        self.assertEqual(keys.tobytes(), before.tobytes())
        self.assertEqual(first.tobytes(), attention_batch(queries, keys, values, lens, 0.25).tobytes())

    def test_batch_matches_single_requests(self):
        rng = np.random.default_rng(41)
        queries = to_half(rng.standard_normal((2, 3, 5, 16)))
        keys = to_half(rng.standard_normal((2, 3, 37, 16)))
        values = to_half(rng.standard_normal((2, 3, 37, 16)))
        lens = np.broadcast_to(np.array([1, 8, 20, 36, 37]), (2, 3, 5))
        out = attention_batch(queries, keys, values, lens, 0.25)
        for b in range(2):
            for h in range(3):
                for j in range(5):
                    req = AttentionRequest(
                        query=HalfMatrix.from_array(queries[b, h, j:j + 1]),
                        keys=HalfMatrix.from_array(keys[b, h]),
                        values=HalfMatrix.from_array(values[b, h]),
                        valid_len=int(lens[b, h, j]),
                        scale=0.25,
                    )
                    self.assertEqual(out[b, h, j].tobytes(), attention_accelerated(req).tobytes())

    def test_request_invariants(self):
        rng = np.random.default_rng(43)
        with self.assertRaises(ContractViolation):
            random_request(rng, 4, 8, valid_len=5)
        with self.assertRaises(ShapeError):
            AttentionRequest(
                query=HalfMatrix.from_array(np.ones((1, 8))),
                keys=HalfMatrix.from_array(np.ones((4, 8))),
                values=HalfMatrix.from_array(np.ones((3, 8))),
                valid_len=3,
            )


class AttentionOracleTest(SimpleTestCase):

    def test_weights_normalised(self):
        req = random_request(np.random.default_rng(47), 64, 8, valid_len=30)
        ones = AttentionRequest(
            query=req.query, keys=req.keys,
            values=HalfMatrix.from_array(np.ones((64, 8))), valid_len=30)
        np.testing.assert_allclose(attention_oracle(ones), np.ones(8), rtol=0, atol=1e-12)

    def test_scaling_keys_is_compensated_by_scale(self):
        rng = np.random.default_rng(53)
        req = random_request(rng, 20, 8)
        # powers of two keep the scaled keys exact in binary16
        scaled = AttentionRequest(
            query=req.query,
            keys=HalfMatrix.from_array(req.keys.data.astype(np.float64) * 4.0),
            values=req.values,
            valid_len=req.valid_len,
            scale=req.scale / 4.0,
        )
        np.testing.assert_allclose(attention_oracle(scaled), attention_oracle(req), rtol=0, atol=1e-12)


class HostMatmulTest(SimpleTestCase):

    def test_row_subsets_reproduce_rows(self):
        rng = np.random.default_rng(59)
        x = to_half(rng.standard_normal((12, 48)))
        w = to_half(rng.uniform(-0.1, 0.1, (48, 48)))
        full = host_matmul(x, w)
        self.assertEqual(host_matmul(x[:3], w).tobytes(), full[:3].tobytes())

    def test_shape_error(self):
        with self.assertRaises(ShapeError):
            host_matmul(np.ones((2, 3), dtype=np.float16), np.ones((2, 3), dtype=np.float16))
