"""
Property suites behind `manage.py validate`. A suite returns the failures it
found, an empty list when the property holds.
"""
import logging
import math
import tempfile
from fractions import Fraction

import numpy as np

from engine.harness import expected_spills, ledger_mismatches, random_run_config, random_spec, run_schemes
from engine.pipeline import generate
from engine.schemes import RunConfig, Scheme
from kv_store.backends import FileBackend, MemoryBackend
from kv_store.exceptions import CapacityError, DirectIOError, ProtocolError
from kv_store.layout import ModelSpec, plan_shards
from kv_store.signals import AlignmentAudit
from kv_store.storage import (
    KvEntry,
    WritebackBuffer,
    append_decode_entry,
    read_strip_for_attention,
    spill,
    write_prefill,
)
from numerics.kernels import AttentionRequest, HalfMatrix, attention_accelerated, attention_oracle, to_half
from perfmodel.timing import ans_traffic_ratio, traffic_closed_form

logger = logging.getLogger("django")

FIDELITY_CASES = 1000
FIDELITY_TOLERANCE = 2 ** -7
RANDOM_CASES = 20
MEASURED_RATIO_PROMPTS = (2, 3, 15, 127, 1023)


def _ratio_spec(prompt_len: int) -> ModelSpec:
    return ModelSpec(layers=1, heads=1, head_dim=8, batch=1, prompt_len=prompt_len, max_output=2)


def ledger_closed_form() -> list:
    failures = []
    rng = np.random.default_rng(11)
    for case in range(RANDOM_CASES):
        spec = random_spec(rng)
        comparison = run_schemes(spec, **random_run_config(rng, spec, max_csds=8, seed=case))
        for scheme, run in comparison.runs.items():
            for iteration, measured, expected in ledger_mismatches(run):
                failures.append(f"{scheme} {spec} iteration {iteration}: ledger {measured} != {expected}")
    return failures


def _round_trip(backend, spec: ModelSpec, rng: np.random.Generator) -> list:
    shards = plan_shards(spec, 3, backend)
    shape = (spec.batch, spec.heads, spec.prompt_len, spec.head_dim)
    expected = {}
    try:
        for layer in range(spec.layers):
            k, v = to_half(rng.standard_normal(shape)), to_half(rng.standard_normal(shape))
            write_prefill(shards, layer, (k, v))
            for batch in range(spec.batch):
                for head in range(spec.heads):
                    expected[(layer, batch, head)] = (list(k[batch, head]), list(v[batch, head]))
        buf = WritebackBuffer(spill_interval=2)
        for token in range(spec.prompt_len, spec.context):
            for (layer, batch, head), (keys, values) in expected.items():
                k_row, v_row = to_half(rng.standard_normal((2, spec.head_dim)))
                append_decode_entry(buf, KvEntry(layer, batch, head, token, k_row, v_row))
                keys.append(k_row)
                values.append(v_row)
            if buf.end_iteration():
                spill(buf, shards)
        failures = []
        for strip, (keys, values) in expected.items():
            k, v, valid_len = read_strip_for_attention(shards, buf, *strip)
            if valid_len != len(keys):
                failures.append(f"{backend.kind} strip {strip}: {valid_len} tokens, wrote {len(keys)}")
            elif k.data.tobytes() != np.stack(keys).tobytes() or v.data.tobytes() != np.stack(values).tobytes():
                failures.append(f"{backend.kind} strip {strip}: read back different bytes")
        return failures
    finally:
        shards.close()


def round_trip() -> list:
    spec = ModelSpec(layers=2, heads=2, head_dim=24, batch=2, prompt_len=5, max_output=5)
    rng = np.random.default_rng(13)
    with tempfile.TemporaryDirectory() as directory:
        return _round_trip(MemoryBackend(), spec, rng) + _round_trip(FileBackend(directory=directory), spec, rng)


def direct_io_alignment() -> list:
    # 256 byte rows and a spill every 2 steps: each spill is one 512 byte sector per K and V
    spec = ModelSpec(layers=1, heads=2, head_dim=128, batch=1, prompt_len=8, max_output=5)
    failures = []
    with AlignmentAudit() as audit:
        for scheme in (Scheme.ANS, Scheme.ANS_WB):
            try:
                generate(RunConfig(spec=spec, scheme=scheme, num_csds=2, spill_interval=2))
            except DirectIOError as exc:
                failures.append(f"{scheme}: {exc}")
    failures.extend(f"device {device_id} {reason} write of {size} bytes at offset {offset}"
                    for device_id, offset, size, reason in audit.violations)
    spill_sizes = sorted(set(audit.sizes('spill')))
    if spill_sizes != [512]:
        failures.append(f"spills issued writes of {spill_sizes} bytes, expected only 512")
    return failures


def traffic_ratio() -> list:
    failures = []
    for prompt_len in range(2, 1025):
        spec = _ratio_spec(prompt_len)
        baseline = traffic_closed_form(spec, Scheme.BASELINE_MEM, 1).host_interconnect()
        ans = traffic_closed_form(spec, Scheme.ANS, 1).host_interconnect()
        if Fraction(baseline, ans) != ans_traffic_ratio(prompt_len):
            failures.append(f"s={prompt_len}: closed form ratio {Fraction(baseline, ans)}")
    for prompt_len in MEASURED_RATIO_PROMPTS:
        comparison = run_schemes(_ratio_spec(prompt_len), schemes=[Scheme.ANS])
        baseline = comparison.oracle.ledger.at(1).host_interconnect()
        ans = comparison.runs[Scheme.ANS].ledger.at(1).host_interconnect()
        if Fraction(baseline, ans) != ans_traffic_ratio(prompt_len):
            failures.append(f"s={prompt_len}: measured ratio {Fraction(baseline, ans)}")
    return failures


def scheme_equivalence() -> list:
    failures = []
    rng = np.random.default_rng(5)
    for case in range(RANDOM_CASES):
        spec = random_spec(rng)
        fields = random_run_config(rng, spec, seed=case)
        for scheme in run_schemes(spec, **fields).mismatched_schemes():
            failures.append(f"{scheme} diverged from the in-memory oracle on {spec} {fields}")
    return failures


def attention_fidelity() -> list:
    rng = np.random.default_rng(3)
    worst = 0.0
    leaks = 0
    for _ in range(FIDELITY_CASES):
        head_dim = int(rng.choice([16, 32, 64, 128]))
        tokens = int(math.exp(rng.uniform(0.0, math.log(4096))))
        valid_len = int(rng.integers(1, tokens + 1))
        values = rng.standard_normal((tokens, head_dim))
        req = AttentionRequest(
            query=HalfMatrix.from_array(rng.standard_normal((1, head_dim))),
            keys=HalfMatrix.from_array(rng.standard_normal((tokens, head_dim))),
            values=HalfMatrix.from_array(values),
            valid_len=valid_len,
        )
        out = attention_accelerated(req)
        worst = max(worst, float(np.abs(out.astype(np.float64) - attention_oracle(req)).max()))
        values[valid_len:] = 100.0
        poisoned = AttentionRequest(query=req.query, keys=req.keys, values=HalfMatrix.from_array(values),
                                    valid_len=valid_len)
        if attention_accelerated(poisoned).tobytes() != out.tobytes():
            leaks += 1
    failures = []
    if worst > FIDELITY_TOLERANCE:
        failures.append(f"max abs error {worst:.3g} above {FIDELITY_TOLERANCE:.3g}")
    if leaks:
        failures.append(f"{leaks} cases gave weight to masked positions")
    return failures


def spill_count() -> list:
    spec = ModelSpec(layers=1, heads=2, head_dim=8, batch=2, prompt_len=4, max_output=6)
    failures = []
    for interval in (1, 2, 4):
        _, ledger, _ = generate(RunConfig(spec=spec, scheme=Scheme.ANS_WB, spill_interval=interval))
        if ledger.spills != expected_spills(spec.max_output, interval):
            failures.append(f"c={interval}: {ledger.spills} spills, expected {expected_spills(spec.max_output, interval)}")
    return failures


SUITES = {
    'ledger_closed_form': ledger_closed_form,
    'round_trip': round_trip,
    'direct_io_alignment': direct_io_alignment,
    'traffic_ratio': traffic_ratio,
    'scheme_equivalence': scheme_equivalence,
    'attention_fidelity': attention_fidelity,
    'spill_count': spill_count,
}


def run_suites(names=None) -> dict:
    """
    suite name -> failures, in SUITES order
    """
    results = {}
    for name in (names or SUITES):
        try:
            failures = SUITES[name]()
        except (ProtocolError, CapacityError, DirectIOError) as exc:
            failures = [f"{type(exc).__name__}: {exc}"]
        results[name] = failures
        logger.info(f"validate {name}: {'ok' if not failures else f'{len(failures)} failures'}")
    return results
