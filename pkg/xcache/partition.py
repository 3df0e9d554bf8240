"""
Host-resident cache of pre-projection activations.

The oldest m tokens of every layer keep their input activation X in host
memory instead of K and V. Each decode step regenerates K = X.W_K and
V = X.W_V for that prefix with the host GEMM, the CSDs hold the rest.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from kv_store.layout import ModelSpec
from numerics.exceptions import ShapeError
from numerics.kernels import HALF, host_matmul, to_half
from .exceptions import XCacheConflict, XCacheRangeError

logger = logging.getLogger("django")


@dataclass
class XCachePartition:
    spec: ModelSpec
    cached_tokens: int
    # layer -> (b, m, h*d)
    x_store: dict = field(default_factory=dict, repr=False)
    filled: dict = field(default_factory=dict, repr=False)
    boundary: str = 'prefix'
    ledger: object = field(default=None, repr=False)

    def layer_rows(self, layer: int) -> np.ndarray:
        if not 0 <= layer < self.spec.layers:
            raise XCacheRangeError(f"layer {layer} outside [0, {self.spec.layers})")
        if layer not in self.x_store:
            self.x_store[layer] = np.zeros((self.spec.batch, self.cached_tokens, self.spec.hidden), dtype=HALF)
            self.filled[layer] = np.zeros(self.cached_tokens, dtype=bool)
        return self.x_store[layer]

    def stored_tokens(self, layer: int) -> int:
        """
        length of the contiguous stored prefix
        """
        if layer not in self.filled:
            return 0
        gaps = np.flatnonzero(~self.filled[layer])
        return int(gaps[0]) if gaps.size else self.cached_tokens

    def host_bytes(self, layer: int) -> int:
        stored = int(self.filled[layer].sum()) if layer in self.filled else 0
        return stored * self.spec.batch * self.spec.hidden * self.spec.elem_bytes

    def kv_equivalent_bytes(self, tokens: int = None) -> int:
        """
        K plus V bytes the same tokens would take in one layer
        """
        tokens = self.cached_tokens if tokens is None else tokens
        return 2 * tokens * self.spec.batch * self.spec.hidden * self.spec.elem_bytes


def partition_budget(spec: ModelSpec, host_bytes_free: int, ledger=None) -> XCachePartition:
    if host_bytes_free < 0:
        raise ValueError(f"host budget must be nonnegative, got {host_bytes_free}")
    # one X row per layer and batch element: L·b·h·d·2 bytes, the L·h·d·2 form for b = 1
    per_token = spec.layers * spec.batch * spec.hidden * spec.elem_bytes
    cached = min(spec.context, int(host_bytes_free) // per_token)
    logger.debug(f"X-cache holds {cached} of {spec.context} tokens per layer")
    return XCachePartition(spec=spec, cached_tokens=cached, ledger=ledger)


def store_x(part: XCachePartition, layer: int, token_index: int, x_row) -> None:
    """
    x_row is (b, h*d), or (h*d,) for a single batch element. Storing the same
    row again is a no-op.
    """
    if not 0 <= token_index < part.cached_tokens:
        raise XCacheRangeError(f"token {token_index} outside the cached prefix of {part.cached_tokens}")
    spec = part.spec
    row = to_half(x_row).reshape(-1, spec.hidden) if np.size(x_row) % spec.hidden == 0 else None
    if row is None or row.shape[0] != spec.batch:
        raise ShapeError(f"X row must hold {spec.batch} x {spec.hidden} values, got shape {np.shape(x_row)}")
    rows = part.layer_rows(layer)
    if part.filled[layer][token_index]:
        if rows[:, token_index].tobytes() != row.tobytes():
            raise XCacheConflict(f"X row {token_index} of layer {layer} is already cached with other values")
        return
    rows[:, token_index] = row
    part.filled[layer][token_index] = True
    if part.ledger is not None:
        part.ledger.credit('host_mem_traffic', row.nbytes)


def regenerate_kv(part: XCachePartition, layer: int, w_k, w_v, tokens: int = None) -> tuple:
    """
    K and V for the first `tokens` cached rows (all stored rows by default),
    each shaped (b, h, tokens, d)
    """
    spec = part.spec
    for name, weight in (('W_K', w_k), ('W_V', w_v)):
        if tuple(np.shape(getattr(weight, 'data', weight))) != (spec.hidden, spec.hidden):
            raise ShapeError(f"{name} must be {spec.hidden}x{spec.hidden}")
    available = part.stored_tokens(layer)
    tokens = available if tokens is None else tokens
    if not 1 <= tokens <= available:
        raise XCacheRangeError(f"cannot regenerate {tokens} tokens, layer {layer} holds {available}")
    x = part.x_store[layer][:, :tokens].reshape(-1, spec.hidden)
    if part.ledger is not None:
        part.ledger.credit('host_mem_traffic', x.nbytes)

    def project(weight):
        out = host_matmul(x, weight).reshape(spec.batch, tokens, spec.heads, spec.head_dim)
        return np.ascontiguousarray(out.transpose(0, 2, 1, 3))

    return project(w_k), project(w_v)
