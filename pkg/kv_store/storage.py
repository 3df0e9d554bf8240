"""
Reads and writes of KV strips, plus the host-side writeback buffer.

Rows are little-endian binary16, token-major. Every device write starts on
the sector that holds the strip's first free byte: the host keeps that
sector's filled part (`KvExtent.tail`), prepends it to the new rows and pads
with zeros to the next sector boundary.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from numerics.kernels import HALF, HalfMatrix, to_half
from numerics.exceptions import ShapeError
from .exceptions import CapacityError, ProtocolError
from .layout import KvExtent, ShardMap, round_up
from .signals import kv_spilled

logger = logging.getLogger("django")

ROW_DTYPE = np.dtype('<f2')


@dataclass(frozen=True, eq=False)
class KvEntry:
    layer: int
    batch_idx: int
    head_idx: int
    token_index: int
    k_row: np.ndarray
    v_row: np.ndarray

    def __post_init__(self):
        k_row = to_half(self.k_row).reshape(-1)
        v_row = to_half(self.v_row).reshape(-1)
        if k_row.shape != v_row.shape:
            raise ShapeError(f"K row has {k_row.size} elements, V row {v_row.size}")
        object.__setattr__(self, 'k_row', k_row)
        object.__setattr__(self, 'v_row', v_row)

    @property
    def strip(self) -> tuple:
        return self.layer, self.batch_idx, self.head_idx

    @property
    def nbytes(self) -> int:
        return self.k_row.nbytes + self.v_row.nbytes


@dataclass
class WritebackBuffer:
    spill_interval: int = 2
    pending: dict = field(default_factory=dict)
    iterations_since_spill: int = 0
    # bumped by every spill, readers see a strip either before or after an epoch
    epoch: int = 0
    ledger: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.spill_interval < 1:
            raise ProtocolError(f"spill interval must be at least 1, got {self.spill_interval}")

    def pending_count(self, strip: tuple) -> int:
        return len(self.pending.get(strip, ()))

    def total_pending(self) -> int:
        return sum(len(rows) for rows in self.pending.values())

    def end_iteration(self) -> bool:
        """
        iteration barrier, returns True when a spill is due
        """
        self.iterations_since_spill += 1
        return self.iterations_since_spill >= self.spill_interval


def _credit(ledger, link: str, nbytes: int, device_id: int = None) -> None:
    if ledger is not None:
        ledger.credit(link, nbytes, device_id)


@dataclass(frozen=True, eq=False)
class _Append:
    """
    one sector-aligned device write, computed before anything is issued
    """
    extent: KvExtent
    offset: int
    payload: bytes
    count: int
    tail: bytes

    @property
    def nbytes(self) -> int:
        return len(self.payload)


def _plan_append(extent: KvExtent, rows: np.ndarray, misalign: int = 0) -> _Append:
    count = rows.shape[0]
    if extent.used_tokens + count > extent.capacity_tokens:
        raise CapacityError(
            f"extent on device {extent.device_id} holds {extent.capacity_tokens} tokens, "
            f"cannot append {count} after {extent.used_tokens}")
    block = settings.DIRECT_IO_BLOCK_BYTES
    start = extent.used_tokens * extent.row_bytes
    aligned_start = start - start % block
    payload = extent.tail + np.ascontiguousarray(rows, dtype=ROW_DTYPE).tobytes()
    end = aligned_start + len(payload)
    padded = round_up(len(payload), block)
    return _Append(
        extent=extent,
        offset=extent.byte_offset + aligned_start + misalign,
        payload=payload + bytes(padded - len(payload)),
        count=count,
        tail=payload[end - end % block - aligned_start:],
    )


def _issue(shards: ShardMap, plan: _Append, reason: str) -> None:
    shards.backend.write(plan.extent.device_id, plan.offset, plan.payload, reason=reason)


def _commit(shards: ShardMap, plan: _Append) -> int:
    plan.extent.used_tokens += plan.count
    plan.extent.tail = plan.tail
    if shards.ledger is not None:
        shards.ledger.record_storage_write(plan.extent.device_id, plan.nbytes)
    return plan.nbytes


def _append_rows(shards: ShardMap, extent: KvExtent, rows: np.ndarray, reason: str) -> int:
    plan = _plan_append(extent, rows)
    _issue(shards, plan, reason)
    return _commit(shards, plan)


def _read_rows(shards: ShardMap, extent: KvExtent, start: int, count: int) -> np.ndarray:
    raw = shards.backend.read(extent.device_id, extent.byte_offset + start * extent.row_bytes,
                              count * extent.row_bytes)
    return np.frombuffer(raw, dtype=ROW_DTYPE).reshape(count, extent.row_bytes // ROW_DTYPE.itemsize).astype(HALF)


def write_prefill(shards: ShardMap, layer: int, kv: tuple) -> None:
    """
    kv is (keys, values), each shaped (b, h, s, d)
    """
    keys, values = (to_half(m) for m in kv)
    spec = shards.spec
    expected = (spec.batch, spec.heads, keys.shape[2] if keys.ndim == 4 else -1, spec.head_dim)
    if keys.shape != values.shape or keys.shape != expected:
        raise ShapeError(f"prefill K/V must be shaped {expected}, got {keys.shape} and {values.shape}")
    tokens = keys.shape[2]
    if tokens < 1:
        raise ShapeError("prefill needs at least one token")
    for batch in range(spec.batch):
        for head in range(spec.heads):
            k_extent, v_extent = shards.strip(layer, batch, head)
            if k_extent.used_tokens:
                raise ProtocolError(f"prefill into a non-empty strip {(layer, batch, head)}")
            _append_rows(shards, k_extent, keys[batch, head], 'prefill')
            _append_rows(shards, v_extent, values[batch, head], 'prefill')
    _credit(shards.ledger, 'host_interconnect_write', 2 * tokens * spec.strips_per_layer * spec.row_bytes)


def write_entry(shards: ShardMap, entry: KvEntry) -> int:
    """
    plain ANS: the accelerator writes the new K and V rows straight away,
    each padded to its own sector write
    """
    k_extent, v_extent = shards.strip(*entry.strip)
    if entry.token_index != k_extent.used_tokens:
        raise ProtocolError(
            f"entry for token {entry.token_index} but strip {entry.strip} holds {k_extent.used_tokens}")
    issued = _append_rows(shards, k_extent, entry.k_row[None, :], 'entry')
    issued += _append_rows(shards, v_extent, entry.v_row[None, :], 'entry')
    _credit(shards.ledger, 'csd_internal_write', entry.nbytes, k_extent.device_id)
    return issued


def append_decode_entry(buf: WritebackBuffer, entry: KvEntry) -> None:
    rows = buf.pending.setdefault(entry.strip, [])
    if len(rows) >= buf.spill_interval:
        raise ProtocolError(
            f"strip {entry.strip} already holds {len(rows)} pending rows, a spill was missed")
    if rows and entry.token_index != rows[-1].token_index + 1:
        raise ProtocolError(f"token {entry.token_index} does not follow {rows[-1].token_index}")
    rows.append(entry)
    _credit(buf.ledger, 'host_mem_traffic', entry.nbytes)


def spill(buf: WritebackBuffer, shards: ShardMap) -> int:
    """
    append every pending row to its extents in one write per K and V region,
    then clear the buffer. Returns the bytes issued to the devices.

    Extents and the buffer change only once every write went through, a
    failed spill leaves both as they were and can be retried.
    """
    misalign = settings.KV_FAULT_SPILL_MISALIGN
    staged = []
    for strip in sorted(buf.pending):
        entries = buf.pending[strip]
        if not entries:
            continue
        k_extent, v_extent = shards.strip(*strip)
        if entries[0].token_index != k_extent.used_tokens:
            raise ProtocolError(
                f"pending rows of {strip} start at {entries[0].token_index}, extent holds {k_extent.used_tokens}")
        staged.append((entries, (
            _plan_append(k_extent, np.stack([e.k_row for e in entries]), misalign),
            _plan_append(v_extent, np.stack([e.v_row for e in entries]), misalign),
        )))
    for _, plans in staged:
        for plan in plans:
            _issue(shards, plan, 'spill')
    issued = 0
    rows = 0
    for entries, plans in staged:
        issued += sum(_commit(shards, plan) for plan in plans)
        _credit(shards.ledger, 'spill_write', sum(e.nbytes for e in entries))
        rows += len(entries)
    buf.pending.clear()
    buf.iterations_since_spill = 0
    if rows:
        buf.epoch += 1
        if shards.ledger is not None:
            shards.ledger.record_spill()
        kv_spilled.send(sender=WritebackBuffer, rows=rows, nbytes=issued, epoch=buf.epoch)
    return issued


def read_strip_for_attention(shards: ShardMap, buf: WritebackBuffer, layer: int, batch_idx: int,
                             head_idx: int, from_token: int = 0) -> tuple:
    """
    K and V of one strip from token `from_token` on: spilled rows from the
    device, pending rows from the host buffer. valid_len counts the whole
    strip, including any skipped prefix.
    """
    k_extent, v_extent = shards.strip(layer, batch_idx, head_idx)
    pending = buf.pending.get((layer, batch_idx, head_idx), []) if buf is not None else []
    row_bytes = k_extent.row_bytes
    start = min(from_token, k_extent.used_tokens)
    device_rows = k_extent.used_tokens - start
    keys = [_read_rows(shards, k_extent, start, device_rows)]
    values = [_read_rows(shards, v_extent, start, device_rows)]
    _credit(shards.ledger, 'csd_internal_read', 2 * device_rows * row_bytes, k_extent.device_id)
    staged = [e for e in pending if e.token_index >= from_token]
    if staged:
        keys.append(np.stack([e.k_row for e in staged]))
        values.append(np.stack([e.v_row for e in staged]))
        _credit(shards.ledger, 'host_interconnect_write', 2 * len(staged) * row_bytes)
    valid_len = k_extent.used_tokens + len(pending)
    return (HalfMatrix.from_array(np.concatenate(keys)),
            HalfMatrix.from_array(np.concatenate(values)),
            valid_len)
