"""
binary16 kernels.

The accelerator inside each emulated CSD is modelled here: 32 MAC lanes that
accumulate in binary16, a 32x32 tile buffer that transposes in place, and a
softmax unit with four parallel reducers. Host side GEMMs (the GPU stand-in)
and a float64 reference live next to them so every caller shares one
numeric contract.

All binary16 arithmetic rounds to nearest even. Two binary16 operands are
combined exactly in float64 and rounded once, so an add or multiply here is
the correctly rounded binary16 result.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from .exceptions import ContractViolation, NumericDomainError, ShapeError

logger = logging.getLogger("django")

HALF = np.float16


def to_half(values) -> np.ndarray:
    """
    round anything array-like to binary16
    """
    with np.errstate(over='ignore'):
        return np.asarray(values, dtype=np.float64).astype(HALF)


def half_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(over='ignore'):
        return (a.astype(np.float64) + b.astype(np.float64)).astype(HALF)


def _require_finite(*arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericDomainError("non-finite binary16 element")


def _raw(operand) -> np.ndarray:
    if isinstance(operand, HalfMatrix):
        return operand.data
    array = np.asarray(operand)
    if array.dtype != HALF:
        array = to_half(array)
    return array


@dataclass(frozen=True, eq=False)
class HalfMatrix:
    """
    row-major binary16 matrix, the runtime form of X, Q, K, V and all weights
    """
    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype != HALF:
            raise ShapeError(f"HalfMatrix needs float16 data, got {self.data.dtype}")
        if self.data.shape != (self.rows, self.cols):
            raise ShapeError(f"data shape {self.data.shape} does not match {self.rows}x{self.cols}")
        _require_finite(self.data)

    @classmethod
    def from_array(cls, values) -> "HalfMatrix":
        array = to_half(values)
        if array.ndim == 1:
            array = array.reshape(1, -1)
        if array.ndim != 2:
            raise ShapeError(f"HalfMatrix is two dimensional, got {array.ndim} dimensions")
        return cls(rows=array.shape[0], cols=array.shape[1], data=np.ascontiguousarray(array))

    @property
    def array(self) -> np.ndarray:
        return self.data

    @property
    def nbytes(self) -> int:
        return self.rows * self.cols * self.data.itemsize


@dataclass(frozen=True, eq=False)
class AttentionRequest:
    """
    one (batch, head) attention call as the host hands it to an accelerator
    """
    query: HalfMatrix
    keys: HalfMatrix
    values: HalfMatrix
    valid_len: int
    scale: float = None

    def __post_init__(self):
        if self.query.rows != 1:
            raise ShapeError(f"query must be a single row, got {self.query.rows}")
        if self.query.cols != self.keys.cols or self.keys.cols != self.values.cols:
            raise ShapeError(
                f"head_dim mismatch: query {self.query.cols}, keys {self.keys.cols}, values {self.values.cols}")
        if self.keys.rows != self.values.rows:
            raise ShapeError(f"keys have {self.keys.rows} rows but values have {self.values.rows}")
        if not 1 <= self.valid_len <= self.keys.rows:
            raise ContractViolation(f"valid_len {self.valid_len} outside [1, {self.keys.rows}]")
        if self.scale is None:
            object.__setattr__(self, 'scale', 1.0 / math.sqrt(self.head_dim))

    @property
    def head_dim(self) -> int:
        return self.query.cols

    @property
    def tokens(self) -> int:
        return self.keys.rows


@dataclass
class SoftmaxScratch:
    masked: np.ndarray
    running_max: np.ndarray
    exps: np.ndarray = None
    exp_sum: np.ndarray = None


def transpose_tile_inplace(tile) -> np.ndarray:
    """
    swap the tile across its diagonal one row at a time. Only the strip right
    of the diagonal is held aside, never a second tile. Leading dimensions are
    a stack of independent tiles.
    """
    block = _raw(tile) if not isinstance(tile, np.ndarray) else tile
    size = settings.ACCEL_TILE
    if block.shape[-2:] != (size, size):
        raise ShapeError(f"tile must be {size}x{size}, got {block.shape[-2:]}")
    for i in range(size - 1):
        upper = block[..., i, i + 1:].copy()
        block[..., i, i + 1:] = block[..., i + 1:, i]
        block[..., i + 1:, i] = upper
    return block


def _round_up(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


def _pad_tiles(matrix: np.ndarray) -> np.ndarray:
    size = settings.ACCEL_TILE
    rows, cols = matrix.shape[-2:]
    padded_rows, padded_cols = _round_up(rows, size), _round_up(cols, size)
    if (padded_rows, padded_cols) == (rows, cols):
        return matrix
    padded = np.zeros(matrix.shape[:-2] + (padded_rows, padded_cols), dtype=HALF)
    padded[..., :rows, :cols] = matrix
    return padded


def _tiled_transpose(padded: np.ndarray) -> np.ndarray:
    """
    load every 32x32 tile of a padded matrix into the tile buffer in its
    transposed grid position and transpose it there
    """
    size = settings.ACCEL_TILE
    lead = padded.shape[:-2]
    rows, cols = padded.shape[-2:]
    tiles = padded.reshape(*lead, rows // size, size, cols // size, size)
    n = tiles.ndim
    # (..., I, a, J, b) -> (..., J, I, a, b): tile (I, J) lands at (J, I)
    order = list(range(n - 4)) + [n - 2, n - 4, n - 3, n - 1]
    # always a fresh buffer, an unpadded matrix one tile wide would otherwise alias the caller's
    tiles = np.transpose(tiles, order).copy(order='C')
    transpose_tile_inplace(tiles)
    return np.swapaxes(tiles, -3, -2).reshape(*lead, cols, rows)


def _mac_accumulate(vectors: np.ndarray, matrix: np.ndarray, contracted: int) -> np.ndarray:
    """
    vectors (..., Q, K) times matrix (..., K, N) on the MAC array.

    Tiles are visited in row-major tile order and the 32 lanes of a tile in
    ascending order, so every output element sees its partial products in
    ascending contracted index. Each product and each accumulation is rounded
    to binary16. Zero padded lanes past `contracted` are skipped, they would
    add +0 to an accumulator that can never hold -0.
    """
    size = settings.ACCEL_TILE
    lead = np.broadcast_shapes(vectors.shape[:-2], matrix.shape[:-2])
    out = np.zeros(lead + (vectors.shape[-2], matrix.shape[-1]), dtype=np.float64)
    vec = vectors.astype(np.float64)
    mat = matrix.astype(np.float64)
    with np.errstate(over='ignore', invalid='ignore'):
        for tile_row in range(_round_up(contracted, size) // size):
            for lane in range(size):
                k = tile_row * size + lane
                if k >= contracted:
                    break
                products = (vec[..., :, k, None] * mat[..., None, k, :]).astype(HALF)
                out = (out + products).astype(HALF).astype(np.float64)
    return out.astype(HALF)


def _gemv(matrix: np.ndarray, vectors: np.ndarray, transpose_first: bool) -> np.ndarray:
    rows, cols = matrix.shape[-2:]
    contracted, produced = (cols, rows) if transpose_first else (rows, cols)
    if vectors.shape[-1] != contracted:
        raise ShapeError(
            f"vector length {vectors.shape[-1]} does not match contracted dimension {contracted}")
    padded = _pad_tiles(matrix)
    effective = _tiled_transpose(padded) if transpose_first else padded
    out = _mac_accumulate(vectors, effective, contracted)[..., :produced]
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("binary16 accumulator overflowed")
    return out


def gemv_blocked(matrix, vector, transpose_first: bool = False) -> np.ndarray:
    """
    vector times matrix on the accelerator: the vector runs down the rows of
    the matrix (or of its transpose when transpose_first), one output element
    per column. With keys stored t x d, transpose_first gives q . K^T.
    """
    m = _raw(matrix)
    v = _raw(vector)
    if m.ndim < 2 or v.ndim < 1:
        raise ShapeError("gemv_blocked needs a matrix and a vector")
    _require_finite(m, v)
    return _gemv(m, v[..., None, :], transpose_first)[..., 0, :]


def _pairwise(values: np.ndarray, combine) -> np.ndarray:
    while values.shape[-1] > 1:
        values = combine(values[..., 0::2], values[..., 1::2])
    return values[..., 0]


def _softmax_groups(row: np.ndarray, fill) -> np.ndarray:
    """
    lay a (..., t) row out the way the softmax unit streams it:
    (..., chunks, units, lanes), padding the tail with `fill`
    """
    chunk = settings.ACCEL_SOFTMAX_CHUNK
    units = settings.ACCEL_SOFTMAX_UNITS
    length = row.shape[-1]
    padded = np.full(row.shape[:-1] + (_round_up(length, chunk),), fill, dtype=HALF)
    padded[..., :length] = row
    return padded.reshape(*row.shape[:-1], -1, units, chunk // units)


def _mask_and_max(scores: np.ndarray, valid_len: np.ndarray) -> SoftmaxScratch:
    mask = HALF(settings.SOFTMAX_MASK_VALUE)
    positions = np.arange(scores.shape[-1])
    masked = np.where(positions >= valid_len[..., None], mask, scores).astype(HALF)
    groups = _softmax_groups(masked, mask)
    # each unit keeps one running maximum over its lane group of every chunk
    partial = groups.max(axis=(-3, -1))
    running_max = _pairwise(partial, np.maximum)
    return SoftmaxScratch(masked=masked, running_max=running_max)


def _exp_sum(scratch: SoftmaxScratch) -> SoftmaxScratch:
    diff = scratch.masked.astype(np.float64) - scratch.running_max.astype(np.float64)[..., None]
    scratch.exps = np.exp(np.ascontiguousarray(diff)).astype(np.float32).astype(HALF)
    groups = _softmax_groups(scratch.exps, 0)
    # lanes of a group fold pairwise, then each unit adds its groups chunk by chunk
    group_sums = _pairwise(groups, half_add)
    acc = np.zeros(group_sums.shape[:-2] + group_sums.shape[-1:], dtype=HALF)
    for chunk in range(group_sums.shape[-2]):
        acc = half_add(acc, group_sums[..., chunk, :])
    scratch.exp_sum = _pairwise(acc, half_add)
    return scratch


def masked_softmax(scores, valid_len) -> np.ndarray:
    """
    three passes: mask + max, exponential sum, division. `valid_len` is a
    count or an array broadcast over the leading dimensions of `scores`.
    """
    x = _raw(scores)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one score")
    lens = np.broadcast_to(np.asarray(valid_len, dtype=np.int64), x.shape[:-1])
    if np.any(lens < 1):
        raise ContractViolation("valid_len must be at least 1")
    if np.any(lens > x.shape[-1]):
        raise ContractViolation(f"valid_len exceeds the {x.shape[-1]} available scores")
    _require_finite(x)
    scratch = _exp_sum(_mask_and_max(x, lens))
    return (scratch.exps.astype(np.float64) / scratch.exp_sum.astype(np.float64)[..., None]).astype(HALF)


def _scaled_query(query: np.ndarray, scale: float) -> np.ndarray:
    # the host ships the query pre-scaled by 1/sqrt(d)
    return (query.astype(np.float64) * scale).astype(HALF)


def attention_accelerated(req: AttentionRequest) -> np.ndarray:
    query = _scaled_query(req.query.data[0], req.scale)
    scores = gemv_blocked(req.keys, query, transpose_first=True)
    weights = masked_softmax(scores, req.valid_len)
    return gemv_blocked(req.values, weights)


def attention_batch(queries, keys, values, valid_lens, scale: float) -> np.ndarray:
    """
    attention_accelerated over stacked strips.

    queries (..., Q, d), keys and values (..., t, d), valid_lens broadcast to
    (..., Q). Every element goes through the same binary16 operations in the
    same order as a single request, so the result is bitwise-identical to
    calling attention_accelerated once per (strip, query).
    """
    q = _raw(queries)
    k = _raw(keys)
    v = _raw(values)
    if k.shape[-2:] != v.shape[-2:] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"incompatible attention operands {q.shape}, {k.shape}, {v.shape}")
    _require_finite(q, k, v)
    scores = _gemv(k, _scaled_query(q, scale), transpose_first=True)
    weights = masked_softmax(scores, valid_lens)
    return _gemv(v, weights, transpose_first=False)


def attention_oracle(req: AttentionRequest) -> np.ndarray:
    """
    float64 reference with exact masking
    """
    query = req.query.data[0].astype(np.float64)
    keys = req.keys.data.astype(np.float64)
    values = req.values.data.astype(np.float64)
    scores = keys @ query * req.scale
    scores[req.valid_len:] = -np.inf
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    return weights @ values


def host_matmul(a, b) -> np.ndarray:
    """
    host GEMM for projections and the MLP: 64-bit accumulation rounded once
    to binary16. Rows are independent, so recomputing any subset of rows
    reproduces them.
    """
    left = _raw(a)
    right = _raw(b)
    if left.shape[-1] != right.shape[-2]:
        raise ShapeError(f"cannot multiply {left.shape} by {right.shape}")
    with np.errstate(over='ignore'):
        out = (left.astype(np.float64) @ right.astype(np.float64)).astype(HALF)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("host GEMM overflowed binary16")
    return out
