"""
Cross-scheme runs with the in-memory baseline as the oracle, shared by the
engine tests and the validate command.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from kv_store.layout import ModelSpec
from perfmodel.timing import traffic_closed_form
from xcache.partition import partition_budget
from .pipeline import generate
from .schemes import FUNCTIONAL_SCHEMES, RunConfig, Scheme
from .weights import build_weights, prompt_embeddings

logger = logging.getLogger("django")


@dataclass
class SchemeRun:
    cfg: RunConfig
    tokens: list
    ledger: object
    report: object

    @property
    def xcache_tokens(self) -> int:
        if self.cfg.scheme != Scheme.ANS_WB_X:
            return 0
        return partition_budget(self.cfg.spec, self.cfg.host_budget_bytes).cached_tokens


@dataclass
class Comparison:
    spec: ModelSpec
    runs: dict = field(default_factory=dict)

    @property
    def oracle(self) -> SchemeRun:
        return self.runs[Scheme.BASELINE_MEM]

    def mismatched_schemes(self) -> list:
        return [scheme for scheme, run in self.runs.items() if run.tokens != self.oracle.tokens]


def random_spec(rng: np.random.Generator, layers=4, heads=8, head_dim=32, batch=8, prompt_len=64,
                max_output=32) -> ModelSpec:
    """
    a toy spec with every dimension drawn up to the given bounds
    """
    return ModelSpec(
        layers=int(rng.integers(1, layers + 1)),
        heads=int(rng.integers(1, heads + 1)),
        head_dim=int(rng.choice([d for d in (4, 8, 16, 24, 32) if d <= head_dim])),
        batch=int(rng.integers(1, batch + 1)),
        prompt_len=int(rng.integers(1, prompt_len + 1)),
        max_output=int(rng.integers(1, max_output + 1)),
    )


def random_run_config(rng: np.random.Generator, spec: ModelSpec, max_csds: int = 8, seed: int = 0) -> dict:
    """
    scheme-independent RunConfig fields for one randomized point
    """
    x_bytes_per_token = spec.layers * spec.batch * spec.hidden * spec.elem_bytes
    return dict(
        num_csds=int(rng.integers(1, max_csds + 1)),
        spill_interval=int(rng.choice([1, 2, 4])),
        host_budget_bytes=int(rng.integers(0, spec.context + 2)) * x_bytes_per_token,
        seed=seed,
    )


def run_schemes(spec: ModelSpec, schemes=FUNCTIONAL_SCHEMES, **fields) -> Comparison:
    """
    run every scheme on the same weights and prompt, the baseline always included
    """
    seed = fields.get('seed', 0)
    weights = build_weights(spec, seed)
    embeddings = prompt_embeddings(spec, seed)
    comparison = Comparison(spec=spec)
    ordered = [Scheme.BASELINE_MEM] + [s for s in schemes if s != Scheme.BASELINE_MEM]
    for scheme in ordered:
        cfg = RunConfig(spec=spec, scheme=scheme, **fields)
        tokens, ledger, report = generate(cfg, embeddings, weights)
        comparison.runs[Scheme(scheme)] = SchemeRun(cfg=cfg, tokens=tokens, ledger=ledger, report=report)
    return comparison


def ledger_mismatches(run: SchemeRun) -> list:
    """
    (iteration, measured, expected) for every iteration where the ledger
    differs from the closed form
    """
    spec = run.cfg.spec
    found = []
    for iteration in range(spec.max_output):
        expected = traffic_closed_form(spec, run.cfg.scheme, iteration, run.cfg.spill_interval,
                                       run.xcache_tokens).scaled(spec.layers)
        measured = run.ledger.at(iteration)
        if measured != expected:
            found.append((iteration, measured, expected))
    return found


def expected_spills(max_output: int, interval: int) -> int:
    decode_steps = max_output - 1
    return decode_steps // interval + (1 if decode_steps % interval else 0)
