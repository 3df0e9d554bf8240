import tempfile
from fractions import Fraction

import numpy as np
from django.test import SimpleTestCase, override_settings

from engine.harness import (
    expected_spills,
    ledger_mismatches,
    random_run_config,
    random_spec,
    run_schemes,
)
from engine.pipeline import decode_step, generate, prefill
from engine.schemes import RunConfig, Scheme
from engine.weights import build_weights, prompt_embeddings
from kv_store.layout import ModelSpec
from kv_store.storage import read_strip_for_attention
from numerics.exceptions import ContractViolation, ShapeError
from numerics.kernels import host_matmul
from perfmodel.timing import ans_traffic_ratio


def toy_spec(**overrides):
    fields = dict(layers=2, heads=4, head_dim=16, batch=3, prompt_len=8, max_output=8)
    fields.update(overrides)
    return ModelSpec(**fields)


class WeightsTest(SimpleTestCase):

    def test_same_seed_same_weights(self):
        spec = toy_spec()
        self.assertEqual(build_weights(spec, 0).digest(), build_weights(spec, 0).digest())
        self.assertNotEqual(build_weights(spec, 0).digest(), build_weights(spec, 1).digest())

    def test_shapes_and_range(self):
        spec = toy_spec()
        weights = build_weights(spec, 0)
        self.assertEqual(len(weights.layers), 2)
        layer = weights.layers[0]
        self.assertEqual((layer.w_q.rows, layer.w_q.cols), (64, 64))
        self.assertEqual((layer.w_mlp1.rows, layer.w_mlp1.cols), (64, 256))
        self.assertEqual((layer.w_mlp2.rows, layer.w_mlp2.cols), (256, 64))
        for matrix in layer.matrices():
            self.assertLessEqual(float(np.abs(matrix.data.astype(np.float64)).max()), 0.1)

    def test_prompt_embeddings(self):
        spec = toy_spec()
        first = prompt_embeddings(spec, 3)
        self.assertEqual(first.shape, (3, 8, 64))
        self.assertEqual(first.tobytes(), prompt_embeddings(spec, 3).tobytes())


class RunConfigTest(SimpleTestCase):

    def test_defaults(self):
        cfg = RunConfig(spec=toy_spec(), scheme='ans_wb')
        self.assertEqual(cfg.spill_interval, 2)
        self.assertIs(cfg.scheme, Scheme.ANS_WB)

    def test_rejections(self):
        with self.assertRaises(ContractViolation):
            RunConfig(spec=toy_spec(), scheme=Scheme.KV_IN_HOST)
        with self.assertRaises(ContractViolation):
            RunConfig(spec=toy_spec(), spill_interval=0)
        with self.assertRaises(ContractViolation):
            RunConfig(spec=toy_spec(), num_csds=0)


class PrefillTest(SimpleTestCase):

    def test_single_token_prompt(self):
        spec = toy_spec(prompt_len=1)
        state = prefill(RunConfig(spec=spec), prompt_embeddings(spec, 0))
        self.assertEqual(state.iteration, 1)
        self.assertEqual([len(tokens) for tokens in state.tokens], [1, 1, 1])

    def test_prefill_identical_across_destinations(self):
        spec = toy_spec()
        embeddings = prompt_embeddings(spec, 0)
        weights = build_weights(spec, 0)
        baseline = prefill(RunConfig(spec=spec), embeddings, weights)
        ans = prefill(RunConfig(spec=spec, scheme=Scheme.ANS, num_csds=3), embeddings, weights)
        self.assertEqual(baseline.activations.data.tobytes(), ans.activations.data.tobytes())
        kv_bytes = spec.prompt_len * 2 * spec.batch * spec.heads * spec.head_dim * 2
        for state in (baseline, ans):
            self.assertEqual(state.context.ledger.at(0).host_interconnect_write, spec.layers * kv_bytes)

    def test_stored_keys_are_the_projection_on_whole_tiles(self):
        spec = ModelSpec(layers=1, heads=2, head_dim=32, batch=2, prompt_len=32, max_output=2)
        embeddings = prompt_embeddings(spec, 0)
        weights = build_weights(spec, 0)
        rows = embeddings.reshape(-1, spec.hidden)
        keys = host_matmul(rows, weights.layers[0].w_k).reshape(spec.batch, spec.prompt_len, spec.heads, spec.head_dim)
        values = host_matmul(rows, weights.layers[0].w_v).reshape(spec.batch, spec.prompt_len, spec.heads, spec.head_dim)
        baseline = prefill(RunConfig(spec=spec), embeddings, weights).context
        ans = prefill(RunConfig(spec=spec, scheme=Scheme.ANS, num_csds=3), embeddings, weights).context
        for batch in range(spec.batch):
            for head in range(spec.heads):
                expected_k = np.ascontiguousarray(keys[batch, :, head])
                expected_v = np.ascontiguousarray(values[batch, :, head])
                stored_k = baseline.host_kv.keys[0, batch, head, :spec.prompt_len]
                self.assertEqual(stored_k.tobytes(), expected_k.tobytes())
                k, v, valid_len = read_strip_for_attention(ans.shards, None, 0, batch, head)
                self.assertEqual(valid_len, spec.prompt_len)
                self.assertEqual(k.data.tobytes(), expected_k.tobytes())
                self.assertEqual(v.data.tobytes(), expected_v.tobytes())
        ans.close()

    def test_embedding_shape_checked(self):
        spec = toy_spec()
        with self.assertRaises(ShapeError):
            prefill(RunConfig(spec=spec), np.zeros((3, 7, 64)))


class DecodeTest(SimpleTestCase):

    def test_valid_len_grows_by_one_per_step(self):
        spec = toy_spec(max_output=6)
        cfg = RunConfig(spec=spec, scheme=Scheme.ANS_WB, num_csds=2)
        state = prefill(cfg, prompt_embeddings(spec, 0))
        for step in range(1, 6):
            state = decode_step(cfg, state)
            ctx = state.context
            _, _, valid_len = read_strip_for_attention(ctx.shards, ctx.buffer, 1, 2, 3)
            self.assertEqual(valid_len, spec.prompt_len + step)
        with self.assertRaises(ContractViolation):
            decode_step(cfg, state)

    def test_first_decode_reads_the_prompt_on_the_devices(self):
        spec = toy_spec()
        _, ledger, _ = generate(RunConfig(spec=spec, scheme=Scheme.ANS, num_csds=4))
        per_block = spec.prompt_len * 2 * spec.batch * spec.heads * spec.head_dim * 2
        self.assertEqual(ledger.at(1).csd_internal_read, spec.layers * per_block)
        self.assertEqual(sum(ledger.csd_internal_read), ledger.totals.csd_internal_read)

    def test_single_token_generation(self):
        spec = toy_spec(max_output=1)
        for scheme in (Scheme.BASELINE_MEM, Scheme.ANS_WB_X):
            tokens, ledger, report = generate(RunConfig(spec=spec, scheme=scheme, host_budget_bytes=10 ** 6))
            self.assertEqual([len(t) for t in tokens], [1, 1, 1])
            decode = ledger.decode_totals()
            self.assertEqual(decode.host_interconnect_read + decode.csd_internal_read, 0)
            self.assertEqual(ledger.spills, 0)
            self.assertEqual(report.decode_seconds, 0)


class SchemeEquivalenceTest(SimpleTestCase):

    def test_toy_config(self):
        comparison = run_schemes(toy_spec(), num_csds=2, host_budget_bytes=4 * 2 * 3 * 64 * 2)
        self.assertEqual(comparison.mismatched_schemes(), [])
        self.assertEqual(len(comparison.runs), 4)
        for run in comparison.runs.values():
            self.assertEqual([len(t) for t in run.tokens], [8, 8, 8])

    def test_randomized_configs(self):
        rng = np.random.default_rng(2024)
        specs = [random_spec(rng) for _ in range(20)]
        # whole 32x32 tiles on both the key and the value pass
        specs.append(ModelSpec(layers=2, heads=2, head_dim=32, batch=2, prompt_len=64, max_output=4))
        for case, spec in enumerate(specs):
            fields = random_run_config(rng, spec, seed=case)
            comparison = run_schemes(spec, **fields)
            self.assertEqual(comparison.mismatched_schemes(), [], f"case {case}: {spec} {fields}")
            for scheme, run in comparison.runs.items():
                self.assertEqual(ledger_mismatches(run), [], f"case {case} {scheme}: {spec} {fields}")
                if scheme in (Scheme.ANS_WB, Scheme.ANS_WB_X):
                    self.assertEqual(run.ledger.spills, expected_spills(spec.max_output, fields['spill_interval']))

    @override_settings(KV_BACKEND='file')
    def test_file_backed_devices(self):
        with tempfile.TemporaryDirectory() as directory, self.settings(KV_DEVICE_DIR=directory):
            comparison = run_schemes(toy_spec(max_output=5), num_csds=3)
            self.assertEqual(comparison.mismatched_schemes(), [])


class SpillCountTest(SimpleTestCase):

    def test_in_loop_and_residual_spills(self):
        spec = toy_spec(layers=1, max_output=6)
        for interval, expected in ((1, 5), (2, 3), (4, 2), (8, 1)):
            _, ledger, _ = generate(RunConfig(spec=spec, scheme=Scheme.ANS_WB, spill_interval=interval))
            self.assertEqual(ledger.spills, expected)
            self.assertEqual(expected, expected_spills(6, interval))

    def test_every_row_reaches_the_devices(self):
        spec = toy_spec(layers=1, max_output=7)
        _, ledger, _ = generate(RunConfig(spec=spec, scheme=Scheme.ANS_WB, spill_interval=4))
        strip_rows = 2 * spec.batch * spec.heads * spec.head_dim * 2
        self.assertEqual(ledger.totals.spill_write, 6 * strip_rows)


class TrafficRatioTest(SimpleTestCase):

    def test_measured_ratio(self):
        for s in (2, 3, 15, 127, 1023):
            spec = ModelSpec(layers=1, heads=1, head_dim=8, batch=1, prompt_len=s, max_output=2)
            comparison = run_schemes(spec, schemes=[Scheme.ANS])
            baseline = comparison.runs[Scheme.BASELINE_MEM].ledger.at(1).host_interconnect()
            ans = comparison.runs[Scheme.ANS].ledger.at(1).host_interconnect()
            self.assertEqual(Fraction(baseline, ans), ans_traffic_ratio(s))


class CausalityTest(SimpleTestCase):

    def test_longer_generation_keeps_its_prefix(self):
        for scheme in (Scheme.BASELINE_MEM, Scheme.ANS_WB_X):
            short, _, _ = generate(RunConfig(spec=toy_spec(max_output=4), scheme=scheme, host_budget_bytes=4096))
            long, _, _ = generate(RunConfig(spec=toy_spec(max_output=8), scheme=scheme, host_budget_bytes=4096))
            self.assertEqual([t[:4] for t in long], short)

    def test_later_prompt_tokens_do_not_reach_earlier_positions(self):
        spec = toy_spec(max_output=1)
        embeddings = prompt_embeddings(spec, 0)
        altered = embeddings.copy()
        altered[:, -1] = 0
        weights = build_weights(spec, 0)
        full = prefill(RunConfig(spec=spec), embeddings, weights).context.host_kv
        cut = prefill(RunConfig(spec=spec), altered, weights).context.host_kv
        # K and V of positions before the altered one are unchanged in every layer
        self.assertEqual(full.keys[:, :, :, :7].tobytes(), cut.keys[:, :, :, :7].tobytes())
        self.assertEqual(full.values[:, :, :, :7].tobytes(), cut.values[:, :, :, :7].tobytes())
