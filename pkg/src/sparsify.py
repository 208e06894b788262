"""
Layer-wise top-k gradient sparsification.

Compression keeps per-layer momentum and residual buffers: momentum is
applied before selection, transmitted coordinates are cleared from both
buffers, and the untransmitted mass waits in the residual.
"""

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from errors import InvalidParameter, KTooLarge, ShapeMismatch

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 4096
WIRE_HEADER = struct.Struct('<IQQ')
WIRE_ENTRY = np.dtype([('index', '<u8'), ('value', '<f4')])


@dataclass
class SparseGradient:
    layer_id: int
    indices: np.ndarray
    values: np.ndarray
    dense_len: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.indices.shape != self.values.shape:
            raise ShapeMismatch(f"{self.indices.size} indices but {self.values.size} values")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise InvalidParameter("sparse indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dense_len:
                raise InvalidParameter(f"sparse index outside [0, {self.dense_len})")

    @property
    def density(self):
        return self.indices.size / self.dense_len if self.dense_len else 0.0


@dataclass
class CompressionState:
    sparsity_ratio: float
    momentum: float = 0.9
    chunk_size: int = DEFAULT_CHUNK_SIZE
    velocity: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.sparsity_ratio < 1.0:
            raise InvalidParameter(f"sparsity_ratio must be in [0, 1), got {self.sparsity_ratio}")

    def buffers(self, layer_id, size):
        if layer_id not in self.velocity:
            self.velocity[layer_id] = np.zeros(size, dtype=np.float32)
            self.residual[layer_id] = np.zeros(size, dtype=np.float32)
        v, r = self.velocity[layer_id], self.residual[layer_id]
        if v.size != size:
            raise ShapeMismatch(f"layer {layer_id} has {v.size} entries, gradient has {size}")
        return v, r


def keep_count(length, sparsity_ratio):
    """k = ceil((1 - s) * len), at least 1."""
    return max(1, math.ceil(round((1.0 - sparsity_ratio) * length, 9)))


def default_chunks(length, chunk_size=DEFAULT_CHUNK_SIZE):
    return max(1, math.ceil(length / chunk_size))


def _select(keys, ids, k):
    # largest key first, ties to the lower index
    order = np.lexsort((ids, -keys))[:k]
    return ids[order]


def topk_full_sort(t, k):
    """Reference selection: sort everything by (-|t|, index)."""
    t = np.ravel(np.asarray(t))
    if k > t.size:
        raise KTooLarge(k, t.size)
    ids = np.arange(t.size)
    chosen = np.sort(_select(np.abs(t), ids, k))
    return chosen, t[chosen]


def topk_divide_conquer(t, k, m_chunks=None):
    """
    Exact top-k by magnitude in two rounds.

    The tensor is cut into ``m_chunks`` contiguous chunks, each chunk yields
    its own top-min(k, chunk_len), and a second selection over those
    candidates picks the final k. Every true top-k element is the top-k of
    its own chunk, so nothing is lost. Returns indices in ascending order.
    """
    t = np.ravel(np.asarray(t))
    if k > t.size:
        raise KTooLarge(k, t.size)
    if k <= 0:
        return np.empty(0, dtype=np.int64), t[:0]
    m_chunks = default_chunks(t.size) if m_chunks is None else max(1, min(int(m_chunks), t.size))
    keys = np.abs(t)
    candidates = []
    for ids in np.array_split(np.arange(t.size), m_chunks):
        candidates.append(_select(keys[ids], ids, min(k, ids.size)))
    pool = np.concatenate(candidates)
    chosen = np.sort(_select(keys[pool], pool, k))
    return chosen, t[chosen]


def group_tensors(layers, ratio=2.0):
    """
    Group ``(layer_id, length)`` pairs whose lengths are within ``ratio`` of
    the smallest member; groups are ordered by length.
    """
    if ratio < 1.0:
        raise InvalidParameter(f"grouping ratio must be >= 1, got {ratio}")
    groups = []
    smallest = None
    for layer_id, length in sorted(layers, key=lambda item: (item[1], str(item[0]))):
        if groups and length <= ratio * smallest:
            groups[-1].append(layer_id)
        else:
            groups.append([layer_id])
            smallest = length
    return groups


def select_grouped(tensors, ks, groups):
    """
    Batched top-k for each group of similarly sized tensors.

    Members of a group are padded to a common length and selected together
    row by row; padding sorts below every real magnitude, so each row's
    result equals its own per-layer selection.
    """
    results = {}
    for group in groups:
        flats = [np.ravel(np.asarray(tensors[layer_id])) for layer_id in group]
        width = max(f.size for f in flats)
        keys = np.full((len(flats), width), -1.0)
        for row, flat in enumerate(flats):
            if ks[group[row]] > flat.size:
                raise KTooLarge(ks[group[row]], flat.size)
            keys[row, :flat.size] = np.abs(flat)
        cols = np.arange(width)
        order = np.lexsort((np.broadcast_to(cols, keys.shape), -keys), axis=-1)
        for row, layer_id in enumerate(group):
            chosen = np.sort(order[row, :ks[layer_id]])
            results[layer_id] = (chosen, flats[row][chosen])
    return results


def compress_step(state, layer_id, grad, sparsity_ratio=None):
    """
    One compression round for a layer; updates ``state`` in place.

    velocity <- momentum * velocity + grad; residual <- residual + velocity;
    the top-k residual entries are emitted and cleared from both buffers.
    """
    grad = np.ravel(np.asarray(grad, dtype=np.float32))
    ratio = state.sparsity_ratio if sparsity_ratio is None else sparsity_ratio
    velocity, residual = state.buffers(layer_id, grad.size)
    velocity *= state.momentum
    velocity += grad
    residual += velocity
    k = keep_count(grad.size, ratio)
    indices, values = topk_divide_conquer(residual, k, default_chunks(grad.size, state.chunk_size))
    values = values.copy()
    residual[indices] = 0
    velocity[indices] = 0
    return SparseGradient(layer_id=layer_id, indices=indices, values=values, dense_len=grad.size)


def densify(s):
    out = np.zeros(s.dense_len, dtype=np.float32)
    out[s.indices] = s.values
    return out


def encode_sparse(s):
    """layer_id u32, dense_len u64, count u64, then count x (u64 index, f32 value)."""
    if not isinstance(s.layer_id, (int, np.integer)) or not 0 <= s.layer_id < 2 ** 32:
        raise InvalidParameter(f"wire layer id must be an unsigned 32-bit integer, got {s.layer_id!r}")
    entries = np.empty(s.indices.size, dtype=WIRE_ENTRY)
    entries['index'] = s.indices
    entries['value'] = s.values
    return WIRE_HEADER.pack(int(s.layer_id), int(s.dense_len), int(s.indices.size)) + entries.tobytes()


def decode_sparse(message):
    if len(message) < WIRE_HEADER.size:
        raise ShapeMismatch("sparse message shorter than its header")
    layer_id, dense_len, count = WIRE_HEADER.unpack_from(message, 0)
    expected = WIRE_HEADER.size + count * WIRE_ENTRY.itemsize
    if len(message) != expected:
        raise ShapeMismatch(f"sparse message is {len(message)} bytes, header promises {expected}")
    entries = np.frombuffer(message, dtype=WIRE_ENTRY, offset=WIRE_HEADER.size, count=count)
    return SparseGradient(layer_id=layer_id, indices=entries['index'].astype(np.int64),
                          values=entries['value'].astype(np.float32), dense_len=dense_len)


def sparsity_for_epoch(target, epoch, warmup_epochs=0, start=0.75):
    """
    Sparsity warm-up: exponential ramp from ``start`` towards ``target``
    over ``warmup_epochs`` epochs (75%, 93.75%, 98.4375%, ... for four
    epochs to 99.9%); ``target`` afterwards or when the ramp is off.
    """
    if warmup_epochs <= 0 or epoch >= warmup_epochs or target <= start:
        return target
    return min(target, 1.0 - (1.0 - start) ** (epoch + 1))
