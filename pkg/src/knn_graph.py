"""
Exact k-nearest-neighbor graph over normalized class weights.

Neighbor lists always start with the class itself; the remaining entries are
ordered by descending inner product, ties going to the lower class index.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from channels import CollectiveMessage, ring_channels
from core_math import as_dense, check_labels, matmul
from errors import DatasetIoError, EmptyShard, GraphFormatError, InvalidParameter, KTooLarge, ShapeMismatch

logger = logging.getLogger(__name__)

GRAPH_MAGIC = b"XKNN"
GRAPH_VERSION = 1


@dataclass
class KnnGraph:
    num_classes: int
    k: int
    neighbors: np.ndarray

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        if self.neighbors.shape != (self.num_classes, self.k):
            raise ShapeMismatch(
                f"neighbors {self.neighbors.shape} vs ({self.num_classes}, {self.k})"
            )

    def __eq__(self, other):
        return (isinstance(other, KnnGraph)
                and self.num_classes == other.num_classes
                and self.k == other.k
                and np.array_equal(self.neighbors, other.neighbors))


@dataclass
class ShardLayout:
    num_shards: int
    num_classes: int

    def __post_init__(self):
        if self.num_shards < 1:
            raise InvalidParameter("a layout needs at least one shard")
        if self.num_classes < self.num_shards:
            raise EmptyShard(self.num_classes)
        base, extra = divmod(self.num_classes, self.num_shards)
        sizes = np.full(self.num_shards, base, dtype=np.int64)
        sizes[:extra] += 1
        self.bounds = np.concatenate([[0], np.cumsum(sizes)])
        self.assignment = np.repeat(np.arange(self.num_shards), sizes)

    def classes_of(self, shard):
        return np.arange(self.bounds[shard], self.bounds[shard + 1])

    def shard_of(self, class_index):
        return int(self.assignment[class_index])

    def sizes(self):
        return np.diff(self.bounds)

    def split_rows(self, w):
        """Split an (N, D) matrix into the per-shard row blocks."""
        return [w[self.bounds[p]:self.bounds[p + 1]] for p in range(self.num_shards)]


@dataclass
class CompressedKnnGraph:
    shard: int
    num_classes: int
    shard_classes: np.ndarray
    flat_neighbors: np.ndarray
    k_per_class: np.ndarray
    offsets: np.ndarray
    flat_ranks: np.ndarray

    def slice(self, label):
        start = self.offsets[label]
        return self.flat_neighbors[start:start + self.k_per_class[label]]

    def ranks(self, label):
        start = self.offsets[label]
        return self.flat_ranks[start:start + self.k_per_class[label]]

    def to_csr(self):
        """View as a CSR matrix: row = class, column = retained neighbor, value = rank + 1."""
        indptr = np.append(self.offsets, self.flat_neighbors.size)
        return scipy.sparse.csr_matrix(
            (self.flat_ranks + 1, self.flat_neighbors, indptr),
            shape=(self.num_classes, self.num_classes),
        )


def _ordered_neighbors(scores, own_index, candidate_ids, k):
    """Top-k ids for one class: self first, then (-score, id) order."""
    keep = candidate_ids != own_index
    ids = candidate_ids[keep]
    vals = scores[keep]
    order = np.lexsort((ids, -vals))
    return np.concatenate([[own_index], ids[order[:k - 1]]])


def build_graph_bruteforce(w_norm, k):
    w_norm = as_dense(w_norm)
    n = w_norm.shape[0]
    if k > n:
        raise KTooLarge(k, n)
    if k < 1:
        raise InvalidParameter("k must be at least 1")
    scores = matmul(w_norm, w_norm, transpose_b=True)
    ids = np.arange(n)
    neighbors = np.empty((n, k), dtype=np.int64)
    for j in range(n):
        neighbors[j] = _ordered_neighbors(scores[j], j, ids, k)
    return KnnGraph(num_classes=n, k=k, neighbors=neighbors)


class _RingShard:
    """
    Running k'-candidate lists for the classes one shard owns.

    Incoming blocks are scored ``chunk`` rows at a time so the merged
    candidate matrix never holds more than owned * k' + largest_block entries.
    """

    def __init__(self, shard, block, first_id, limit, largest_block):
        self.shard = shard
        self.block = block
        self.own_ids = np.arange(first_id, first_id + block.shape[0])
        self.limit = limit
        self.chunk = max(1, largest_block // block.shape[0])
        self.cand_ids = np.empty((block.shape[0], 0), dtype=np.int64)
        self.cand_scores = np.empty((block.shape[0], 0), dtype=block.dtype)
        self.peak_entries = 0
        self.transfers = 0

    def absorb(self, block, first_id):
        for start in range(0, block.shape[0], self.chunk):
            self._merge(block[start:start + self.chunk], first_id + start)

    def _merge(self, rows, first_id):
        row_ids = np.arange(first_id, first_id + rows.shape[0])
        scores = matmul(self.block, rows, transpose_b=True)
        new_ids = np.broadcast_to(row_ids, scores.shape)
        # self is placed first at the end, never kept as a candidate
        scores = np.where(new_ids == self.own_ids[:, None], -np.inf, scores)
        ids = np.concatenate([self.cand_ids, new_ids], axis=1)
        scores = np.concatenate([self.cand_scores, scores], axis=1)
        self.peak_entries = max(self.peak_entries, ids.size)
        keep = min(self.limit, ids.shape[1])
        out_ids = np.empty((ids.shape[0], keep), dtype=np.int64)
        out_scores = np.empty((ids.shape[0], keep), dtype=scores.dtype)
        for r in range(ids.shape[0]):
            order = np.lexsort((ids[r], -scores[r]))[:keep]
            out_ids[r] = ids[r, order]
            out_scores[r] = scores[r, order]
        self.cand_ids, self.cand_scores = out_ids, out_scores

    def finish(self, k):
        neighbors = np.empty((self.block.shape[0], k), dtype=np.int64)
        for r in range(self.block.shape[0]):
            real = np.isfinite(self.cand_scores[r])
            neighbors[r] = _ordered_neighbors(
                self.cand_scores[r][real], self.own_ids[r], self.cand_ids[r][real], k
            )
        return neighbors


def build_graph_ring(w_shards, k, kprime=None, threaded=True, stats=None):
    """
    Build the exact graph with shards passing weight blocks around a ring.

    Each shard scores its own block, then receives every other block exactly
    once over P - 1 ring steps, keeping a running k'-candidate list per owned
    class; the final top-k comes from re-ranking those k' candidates.
    ``stats``, if given, receives per-shard peak candidate memory, its bound
    and the number of transfers.
    """
    kprime = 2 * k if kprime is None else kprime
    if k < 1:
        raise InvalidParameter("k must be at least 1")
    if kprime < k:
        raise InvalidParameter(f"kprime={kprime} must be at least k={k}")
    blocks = [as_dense(w) for w in w_shards]
    if not blocks:
        raise EmptyShard(0)
    for p, block in enumerate(blocks):
        if block.shape[0] == 0:
            raise EmptyShard(p)
    dims = {b.shape[1] for b in blocks}
    if len(dims) != 1:
        raise ShapeMismatch(f"shards disagree on the embedding width: {sorted(dims)}")
    num_shards = len(blocks)
    starts = np.concatenate([[0], np.cumsum([b.shape[0] for b in blocks])]).astype(np.int64)
    n = int(starts[-1])
    if k > n:
        raise KTooLarge(k, n)
    limit = min(kprime, n - 1)
    channels = ring_channels(num_shards)
    largest_block = max(b.shape[0] for b in blocks)
    shards = [_RingShard(p, blocks[p], starts[p], limit, largest_block) for p in range(num_shards)]

    def pass_block(p, step, origin):
        channels[p].send(CollectiveMessage('ring_pass', (origin, blocks[origin]), step_tag=step))

    def take_block(p):
        message = channels[(p - 1) % num_shards].receive()
        origin, block = message.payload
        shards[p].absorb(block, starts[origin])
        shards[p].transfers += 1
        return origin

    def run_shard(p):
        shards[p].absorb(blocks[p], starts[p])
        origin = p
        for step in range(num_shards - 1):
            pass_block(p, step, origin)
            origin = take_block(p)
        return shards[p].finish(k)

    if threaded and num_shards > 1:
        with ThreadPoolExecutor(max_workers=num_shards) as pool:
            results = list(pool.map(run_shard, range(num_shards)))
    else:
        # lockstep: every shard sends step s before any shard receives it
        origins = list(range(num_shards))
        for p in range(num_shards):
            shards[p].absorb(blocks[p], starts[p])
        for step in range(num_shards - 1):
            for p in range(num_shards):
                pass_block(p, step, origins[p])
            origins = [take_block(p) for p in range(num_shards)]
        results = [shard.finish(k) for shard in shards]

    if stats is not None:
        stats['peak_candidate_entries'] = [s.peak_entries for s in shards]
        stats['candidate_bound'] = [s.block.shape[0] * limit + largest_block for s in shards]
        stats['transfers'] = [s.transfers for s in shards]
    logger.debug("ring graph built over %d shards, N=%d, k=%d, k'=%d", num_shards, n, k, kprime)
    return KnnGraph(num_classes=n, k=k, neighbors=np.concatenate(results))


def compress_graph(g, layout, shard):
    if not 0 <= shard < layout.num_shards:
        raise InvalidParameter(f"shard {shard} outside [0, {layout.num_shards})")
    if layout.num_classes != g.num_classes:
        raise ShapeMismatch(f"layout covers {layout.num_classes} classes, graph {g.num_classes}")
    owned = layout.assignment[g.neighbors] == shard
    k_per_class = owned.sum(axis=1).astype(np.int64)
    offsets = np.zeros(g.num_classes, dtype=np.int64)
    offsets[1:] = np.cumsum(k_per_class)[:-1]
    # row-major boolean indexing keeps each class's neighbors in rank order
    flat_neighbors = g.neighbors[owned]
    flat_ranks = np.nonzero(owned)[1].astype(np.int64)
    return CompressedKnnGraph(
        shard=shard,
        num_classes=g.num_classes,
        shard_classes=layout.classes_of(shard),
        flat_neighbors=flat_neighbors,
        k_per_class=k_per_class,
        offsets=offsets,
        flat_ranks=flat_ranks,
    )


def quick_access(cg, labels):
    labels = check_labels(labels, cg.num_classes)
    return [cg.slice(y) for y in labels]


def merged_neighbor_lists(compressed, labels):
    """
    Rebuild the full, rank-ordered neighbor list of each label from the
    per-shard compressed graphs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    per_shard_ids = [quick_access(cg, labels) for cg in compressed]
    per_shard_ranks = [[cg.ranks(y) for y in labels] for cg in compressed]
    lists = []
    for i in range(labels.size):
        ids = np.concatenate([s[i] for s in per_shard_ids])
        ranks = np.concatenate([s[i] for s in per_shard_ranks])
        lists.append(ids[np.argsort(ranks, kind='stable')])
    return lists


def save_graph(g, filename):
    """Write the XKNN cache: magic, u32 version, u64 N, then per class u32 k + u32 ids."""
    counts = np.full(g.num_classes, g.k, dtype='<u4')
    rows = np.concatenate([counts[:, None], g.neighbors.astype('<u4')], axis=1)
    try:
        with open(filename, 'wb') as f:
            f.write(GRAPH_MAGIC)
            f.write(struct.pack('<IQ', GRAPH_VERSION, g.num_classes))
            f.write(rows.tobytes())
    except OSError as e:
        raise DatasetIoError(f"cannot write graph {filename}: {e}") from e
    logger.info("graph with %d classes written to %s", g.num_classes, filename)


def load_graph(filename):
    try:
        with open(filename, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DatasetIoError(f"cannot read graph {filename}: {e}") from e
    if len(data) < 16 or data[:4] != GRAPH_MAGIC:
        raise GraphFormatError(f"{filename} is not an XKNN graph file")
    version, n = struct.unpack_from('<IQ', data, 4)
    if version != GRAPH_VERSION:
        raise GraphFormatError(f"{filename}: unsupported graph version {version}")
    if (len(data) - 16) % 4:
        raise GraphFormatError(f"{filename}: body of {len(data) - 16} bytes is not a whole number of u32 words")
    body = np.frombuffer(data, dtype='<u4', offset=16)
    lists = []
    pos = 0
    for _ in range(n):
        if pos >= body.size:
            raise GraphFormatError(f"{filename}: truncated after {len(lists)} classes")
        count = int(body[pos])
        lists.append(body[pos + 1:pos + 1 + count].astype(np.int64))
        pos += 1 + count
    if pos != body.size:
        raise GraphFormatError(f"{filename}: {body.size - pos} trailing words")
    ks = {lst.size for lst in lists}
    if len(ks) > 1:
        raise GraphFormatError(f"{filename}: uneven neighbor counts {sorted(ks)}")
    k = ks.pop() if ks else 0
    neighbors = np.stack(lists) if lists else np.empty((0, k), dtype=np.int64)
    if neighbors.size and neighbors.max() >= n:
        raise GraphFormatError(f"{filename}: neighbor id {neighbors.max()} outside [0, {n})")
    return KnnGraph(num_classes=int(n), k=k, neighbors=neighbors)


def graph_matches_weights(g, w_norm, sample=8):
    """
    Spot check a cached graph: recompute the exact lists of ``sample``
    evenly spaced classes against ``w_norm`` and compare.
    """
    w_norm = as_dense(w_norm)
    if g.num_classes != w_norm.shape[0] or g.k > g.num_classes:
        return False
    rows = np.unique(np.linspace(0, g.num_classes - 1, num=min(sample, g.num_classes)).astype(np.int64))
    scores = matmul(w_norm[rows], w_norm, transpose_b=True)
    ids = np.arange(g.num_classes)
    return all(np.array_equal(_ordered_neighbors(scores[i], j, ids, g.k), g.neighbors[j])
               for i, j in enumerate(rows))
