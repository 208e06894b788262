import logging
from dataclasses import dataclass

import numpy as np

from core_math import LossAndGrad, as_dense, check_labels, matmul, softmax_xent
from errors import InvalidParameter, LabelNotActive, MTooSmall, ShapeMismatch
from knn_graph import KnnGraph, merged_neighbor_lists

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 30.0


@dataclass
class SelectionConfig:
    m_active: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.m_active < 1:
            raise InvalidParameter(f"m_active must be positive, got {self.m_active}")


@dataclass
class ActiveSet:
    class_indices: np.ndarray
    contains_all_labels: bool
    pool_size: int = 0
    padded: int = 0

    def __len__(self):
        return int(self.class_indices.size)

    def local_labels(self, labels):
        """Positions of ``labels`` inside the active subspace."""
        labels = np.asarray(labels, dtype=np.int64)
        pos = np.searchsorted(self.class_indices, labels)
        pos = np.minimum(pos, self.class_indices.size - 1)
        missing = self.class_indices[pos] != labels
        if np.any(missing):
            raise LabelNotActive(labels[np.flatnonzero(missing)[0]])
        return pos


def _neighbor_lists(graph, labels):
    if isinstance(graph, KnnGraph):
        return [graph.neighbors[y] for y in labels]
    return merged_neighbor_lists(list(graph), labels)


def select_active_classes(graph, labels, cfg, n_total):
    """
    KNN-graph active class selection for one mini-batch.

    ``graph`` is a full KnnGraph or the sequence of per-shard compressed
    graphs. The pooled neighbor lists of the batch labels are deduplicated;
    a short pool is padded with seeded random classes from the complement,
    an oversized pool keeps the M best-ranked candidates (best rank position
    over the batch lists, then occurrence count, then class index).
    """
    labels = check_labels(labels, n_total)
    if cfg.m_active > n_total:
        raise InvalidParameter(f"m_active={cfg.m_active} exceeds the {n_total} classes")
    distinct = np.unique(labels)
    if cfg.m_active < distinct.size:
        raise MTooSmall(cfg.m_active, distinct.size)

    best_rank = {}
    counts = {}
    for neighbors in _neighbor_lists(graph, labels):
        for rank, c in enumerate(np.asarray(neighbors).tolist()):
            if c not in best_rank or rank < best_rank[c]:
                best_rank[c] = rank
            counts[c] = counts.get(c, 0) + 1
    # labels always survive truncation
    for y in distinct.tolist():
        best_rank[y] = -1

    pool = np.fromiter(best_rank.keys(), dtype=np.int64, count=len(best_rank))
    padded = 0
    if pool.size < cfg.m_active:
        complement = np.setdiff1d(np.arange(n_total), pool, assume_unique=True)
        rng = np.random.default_rng(cfg.rng_seed)
        extra = rng.choice(complement, size=cfg.m_active - pool.size, replace=False)
        padded = extra.size
        chosen = np.concatenate([pool, extra])
    elif pool.size > cfg.m_active:
        ranked = sorted(pool.tolist(), key=lambda c: (best_rank[c], -counts.get(c, 0), c))
        chosen = np.asarray(ranked[:cfg.m_active], dtype=np.int64)
    else:
        chosen = pool

    class_indices = np.sort(chosen)
    contains = bool(np.all(np.isin(distinct, class_indices)))
    logger.debug("active set: pool=%d padded=%d size=%d", pool.size, padded, class_indices.size)
    return ActiveSet(class_indices=class_indices, contains_all_labels=contains,
                     pool_size=int(pool.size), padded=int(padded))


def _restricted_softmax(x_norm, w_norm, labels, class_indices, scale):
    x_norm = as_dense(x_norm)
    w_norm = as_dense(w_norm, dtype=x_norm.dtype)
    if x_norm.shape[1] != w_norm.shape[1]:
        raise ShapeMismatch(f"features {x_norm.shape} vs weights {w_norm.shape}")
    labels = check_labels(labels, w_norm.shape[0])
    if labels.shape != (x_norm.shape[0],):
        raise ShapeMismatch(f"{x_norm.shape[0]} rows but {labels.size} labels")

    active = ActiveSet(class_indices=class_indices, contains_all_labels=True)
    local = active.local_labels(labels)
    sub = w_norm[class_indices]
    logits = scale * matmul(x_norm, sub, transpose_b=True)
    result = softmax_xent(logits, local)

    g = result.grad_logits
    grad_x = scale * matmul(g, sub)
    grad_sub = scale * matmul(g.T, x_norm)
    grad_w = np.zeros_like(w_norm)
    grad_w[class_indices] = grad_sub
    return LossAndGrad(loss=result.loss, grad_logits=g, grad_features=grad_x, grad_weights=grad_w)


def knn_softmax_forward_backward(x_norm, w_norm, labels, active, scale=DEFAULT_SCALE):
    """
    Softmax cross-entropy over the active classes only.

    ``grad_weights`` is full size; rows outside ``active`` are exactly zero.
    ``grad_logits`` is in the active subspace (column i = active class i).
    """
    return _restricted_softmax(x_norm, w_norm, labels, active.class_indices, scale)


def full_softmax_forward_backward(x_norm, w_norm, labels, scale=DEFAULT_SCALE):
    w_norm = as_dense(w_norm)
    return _restricted_softmax(x_norm, w_norm, labels, np.arange(w_norm.shape[0]), scale)


def m_active_for(num_classes, active_fraction, batch_size):
    """Active class count for a fraction of N, never below the batch's label capacity."""
    m = int(np.ceil(active_fraction * num_classes))
    return int(min(num_classes, max(m, min(batch_size, num_classes))))
