"""
Prefill and decode of the toy transformer under each KV scheme.

Every scheme runs the same kernels on the same operands; only the place the
K and V rows come from changes. Per layer the block is
    h = x + Attn(x) . W_O
    y = h + ReLU(h . W_MLP1) . W_MLP2
with all projections on the host GEMM and attention on the accelerator
kernels. The spill check sits after the last layer of an iteration.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from kv_store.layout import plan_shards
from kv_store.backends import make_backend
from kv_store.storage import (
    KvEntry,
    WritebackBuffer,
    append_decode_entry,
    read_strip_for_attention,
    spill,
    write_entry,
    write_prefill,
)
from numerics.exceptions import ContractViolation, ShapeError
from numerics.kernels import HALF, HalfMatrix, attention_batch, half_add, host_matmul, to_half
from perfmodel.ledger import TrafficLedger
from perfmodel.presets import get_topology
from perfmodel.timing import simulate_timing
from xcache.partition import partition_budget, regenerate_kv, store_x
from .schemes import NEAR_STORAGE_SCHEMES, WRITEBACK_SCHEMES, RunConfig, Scheme
from .weights import ModelWeights, build_weights, prompt_embeddings

logger = logging.getLogger("django")


@dataclass
class HostKvCache:
    """
    KV in host arrays, what the baseline reads back every step
    """
    keys: np.ndarray
    values: np.ndarray


@dataclass
class RunContext:
    cfg: RunConfig
    weights: ModelWeights
    ledger: TrafficLedger
    shards: object = None
    buffer: WritebackBuffer = None
    xcache: object = None
    host_kv: HostKvCache = None

    def close(self) -> None:
        if self.shards is not None:
            self.shards.close()


@dataclass
class DecodeState:
    iteration: int
    activations: HalfMatrix
    tokens: list
    context: RunContext = field(repr=False)


def _open_context(cfg: RunConfig, weights: ModelWeights) -> RunContext:
    spec = cfg.spec
    ledger = TrafficLedger(cfg.num_csds)
    ctx = RunContext(cfg=cfg, weights=weights, ledger=ledger)
    if cfg.scheme == Scheme.BASELINE_MEM:
        shape = (spec.layers, spec.batch, spec.heads, spec.context, spec.head_dim)
        ctx.host_kv = HostKvCache(keys=np.zeros(shape, dtype=HALF), values=np.zeros(shape, dtype=HALF))
    else:
        ctx.shards = plan_shards(spec, cfg.num_csds, make_backend(cfg.backend), ledger=ledger)
    if cfg.scheme in WRITEBACK_SCHEMES:
        ctx.buffer = WritebackBuffer(spill_interval=cfg.spill_interval, ledger=ledger)
    if cfg.scheme == Scheme.ANS_WB_X:
        ctx.xcache = partition_budget(spec, cfg.host_budget_bytes, ledger=ledger)
    return ctx


def _split_heads(rows: np.ndarray, spec, tokens: int) -> np.ndarray:
    # (b*tokens, h*d) -> (b, h, tokens, d)
    split = rows.reshape(spec.batch, tokens, spec.heads, spec.head_dim)
    return np.ascontiguousarray(split.transpose(0, 2, 1, 3))


def _merge_heads(attn: np.ndarray, spec) -> np.ndarray:
    # (b, h, tokens, d) -> (b*tokens, h*d)
    return np.ascontiguousarray(attn.transpose(0, 2, 1, 3)).reshape(-1, spec.hidden)


def _block_tail(x: np.ndarray, attn: np.ndarray, layer_weights) -> np.ndarray:
    h = half_add(x, host_matmul(attn, layer_weights.w_o))
    hidden = np.maximum(host_matmul(h, layer_weights.w_mlp1), HALF(0))
    return half_add(h, host_matmul(hidden, layer_weights.w_mlp2))


def _emit(last: np.ndarray, weights: ModelWeights) -> list:
    logits = host_matmul(last, weights.output)
    return [int(token) for token in np.argmax(logits, axis=-1)]


def _scale(spec) -> float:
    return 1.0 / math.sqrt(spec.head_dim)


def prefill(cfg: RunConfig, embeddings, weights: ModelWeights = None) -> DecodeState:
    spec = cfg.spec
    x = to_half(embeddings)
    if x.shape != (spec.batch, spec.prompt_len, spec.hidden):
        raise ShapeError(
            f"prompt embeddings must be {(spec.batch, spec.prompt_len, spec.hidden)}, got {x.shape}")
    weights = weights or build_weights(spec, cfg.seed)
    ctx = _open_context(cfg, weights)
    ctx.ledger.begin_iteration(0)
    s = spec.prompt_len
    causal = np.arange(1, s + 1)
    rows = x.reshape(-1, spec.hidden)
    for layer, lw in enumerate(weights.layers):
        if ctx.xcache is not None:
            for token in range(min(s, ctx.xcache.cached_tokens)):
                store_x(ctx.xcache, layer, token, x[:, token])
        q, k, v = (_split_heads(host_matmul(rows, w), spec, s) for w in (lw.w_q, lw.w_k, lw.w_v))
        attn = attention_batch(q, k, v, causal, _scale(spec))
        if ctx.host_kv is not None:
            ctx.host_kv.keys[layer, :, :, :s] = k
            ctx.host_kv.values[layer, :, :, :s] = v
            ctx.ledger.credit('host_interconnect_write', k.nbytes + v.nbytes)
        else:
            write_prefill(ctx.shards, layer, (k, v))
        rows = _block_tail(rows, _merge_heads(attn, spec), lw)
        x = rows.reshape(spec.batch, s, spec.hidden)
    first = _emit(x[:, -1], weights)
    return DecodeState(
        iteration=1,
        activations=HalfMatrix.from_array(weights.embedding.data[first]),
        tokens=[[token] for token in first],
        context=ctx,
    )


def _assemble_baseline(ctx, layer, lw, k_new, v_new, t_prev):
    spec = ctx.cfg.spec
    cache = ctx.host_kv
    cache.keys[layer, :, :, t_prev] = k_new
    cache.values[layer, :, :, t_prev] = v_new
    row_bytes = spec.strips_per_layer * spec.row_bytes
    ctx.ledger.credit('host_interconnect_read', 2 * t_prev * row_bytes)
    ctx.ledger.credit('host_interconnect_write', 2 * row_bytes)
    return cache.keys[layer, :, :, :t_prev + 1], cache.values[layer, :, :, :t_prev + 1]


def _assemble_near_storage(ctx, layer, lw, k_new, v_new, t_prev):
    spec = ctx.cfg.spec
    scheme = ctx.cfg.scheme
    prefix = 0
    if scheme == Scheme.ANS_WB_X:
        prefix = min(ctx.xcache.cached_tokens, t_prev)
    if prefix:
        prefix_k, prefix_v = regenerate_kv(ctx.xcache, layer, lw.w_k, lw.w_v, tokens=prefix)
    keys = np.empty((spec.batch, spec.heads, t_prev + 1, spec.head_dim), dtype=HALF)
    values = np.empty_like(keys)
    for batch in range(spec.batch):
        for head in range(spec.heads):
            entry = KvEntry(layer, batch, head, t_prev, k_new[batch, head], v_new[batch, head])
            if scheme == Scheme.ANS:
                # the strip is read before the new row lands on the device
                k, v, _ = read_strip_for_attention(ctx.shards, None, layer, batch, head)
                write_entry(ctx.shards, entry)
                keys[batch, head, :t_prev] = k.data
                values[batch, head, :t_prev] = v.data
                keys[batch, head, t_prev] = entry.k_row
                values[batch, head, t_prev] = entry.v_row
                continue
            append_decode_entry(ctx.buffer, entry)
            k, v, valid_len = read_strip_for_attention(ctx.shards, ctx.buffer, layer, batch, head,
                                                       from_token=prefix)
            if valid_len != t_prev + 1:
                raise ContractViolation(f"strip {entry.strip} holds {valid_len} tokens, expected {t_prev + 1}")
            if prefix:
                keys[batch, head, :prefix] = prefix_k[batch, head]
                values[batch, head, :prefix] = prefix_v[batch, head]
            keys[batch, head, prefix:] = k.data
            values[batch, head, prefix:] = v.data
    return keys, values


def decode_step(cfg: RunConfig, state: DecodeState) -> DecodeState:
    ctx = state.context
    spec = cfg.spec
    i = state.iteration
    if not 1 <= i < spec.max_output:
        raise ContractViolation(f"decode iteration {i} outside [1, {spec.max_output})")
    ctx.ledger.begin_iteration(i)
    t_prev = spec.prompt_len + i - 1
    strip_row = spec.strips_per_layer * spec.row_bytes
    assemble = _assemble_near_storage if cfg.scheme in NEAR_STORAGE_SCHEMES else _assemble_baseline
    x = state.activations.data
    for layer, lw in enumerate(ctx.weights.layers):
        if ctx.xcache is not None and t_prev < ctx.xcache.cached_tokens:
            store_x(ctx.xcache, layer, t_prev, x)
        q, k_new, v_new = (host_matmul(x, w).reshape(spec.batch, spec.heads, spec.head_dim)
                           for w in (lw.w_q, lw.w_k, lw.w_v))
        keys, values = assemble(ctx, layer, lw, k_new, v_new, t_prev)
        if cfg.scheme in NEAR_STORAGE_SCHEMES:
            # Q, K and V reach the CSDs at step start; WB ships K and V with the pending rows
            shipped = 3 if cfg.scheme == Scheme.ANS else 1
            ctx.ledger.credit('host_interconnect_write', shipped * strip_row)
            ctx.ledger.credit('host_interconnect_read', strip_row)
        attn = attention_batch(q[:, :, None, :], keys, values, t_prev + 1, _scale(spec))
        x = _block_tail(x, attn.reshape(spec.batch, spec.hidden), lw)
    emitted = _emit(x, ctx.weights)
    if ctx.buffer is not None and ctx.buffer.end_iteration():
        spill(ctx.buffer, ctx.shards)
    return DecodeState(
        iteration=i + 1,
        activations=HalfMatrix.from_array(ctx.weights.embedding.data[emitted]),
        tokens=[seq + [token] for seq, token in zip(state.tokens, emitted)],
        context=ctx,
    )


def generate(cfg: RunConfig, embeddings=None, weights: ModelWeights = None) -> tuple:
    """
    prefill, n - 1 decode steps and the residual spill. Returns the emitted
    tokens per batch row, the traffic ledger and the timing report.
    """
    spec = cfg.spec
    if embeddings is None:
        embeddings = prompt_embeddings(spec, cfg.seed)
    state = prefill(cfg, embeddings, weights)
    ctx = state.context
    try:
        while state.iteration < spec.max_output:
            state = decode_step(cfg, state)
        if ctx.buffer is not None and ctx.buffer.total_pending():
            spill(ctx.buffer, ctx.shards)
    finally:
        ctx.close()
    topology = cfg.topology if cfg.topology is not None else get_topology()
    report = simulate_timing(spec, topology, cfg.scheme, raid_devices=cfg.num_csds,
                             spill_interval=cfg.spill_interval, host_bytes_free=cfg.host_budget_bytes)
    logger.info(f"{cfg.scheme} generated {spec.batch}x{spec.max_output} tokens, "
                f"{ctx.ledger.spills} spills, {ctx.ledger.totals.host_interconnect()} host link bytes")
    return state.tokens, ctx.ledger, report
