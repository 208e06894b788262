"""
Deterministic simulation of hybrid model/data-parallel training.

Every worker holds a replica of the feature extractor and one shard of the
final fully connected layer. Workers interact only through the collectives
below, which combine contributions in rank order so results are identical on
all workers and across runs. Worker-local stages run through a WorkerPool,
either sequentially or one thread per worker; both modes give the same bits.
"""

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from channels import CommStats
from core_math import (as_dense, check_labels, init_mlp, l2_normalize_backward, l2_normalize_rows,
                       LossAndGrad, matmul, mlp_backward, mlp_forward)
from errors import InvalidParameter, LabelNotActive, LabelOutOfRange, ShapeMismatch
from fccs import LarsConfig, accumulate_gradients, adam_step, lars_local_lr, sgd_momentum_step
from knn_graph import ShardLayout
from knn_softmax import ActiveSet, SelectionConfig, knn_softmax_forward_backward, select_active_classes
from sparsify import CompressionState, compress_step, densify, encode_sparse

logger = logging.getLogger(__name__)

STAGES = ('fe_fwd', 'gather', 'fc_fwd', 'softmax', 'fc_bwd', 'reduce', 'fe_bwd')
COMM_STAGES = ('gather', 'reduce')
DEFAULT_COST_MODEL = {'fe_fwd': 4, 'gather': 2, 'fc_fwd': 2, 'softmax': 1,
                      'fc_bwd': 2, 'reduce': 2, 'fe_bwd': 8}


@dataclass
class WorkerTopology:
    num_workers: int
    shard_layout: ShardLayout

    def __post_init__(self):
        if self.shard_layout.num_shards != self.num_workers:
            raise InvalidParameter(
                f"{self.num_workers} workers but {self.shard_layout.num_shards} fc shards"
            )

    @classmethod
    def create(cls, num_workers, num_classes):
        return cls(num_workers, ShardLayout(num_workers, num_classes))

    @property
    def num_classes(self):
        return self.shard_layout.num_classes

    def replica_of(self, worker):
        return worker

    def shard_of(self, worker):
        return worker


class WorkerPool:
    """Runs one callable per worker, in rank order or on one thread per worker."""

    def __init__(self, num_workers, mode='sequential'):
        if mode not in ('sequential', 'threaded'):
            raise InvalidParameter(f"unknown simulation mode {mode!r}")
        self.num_workers = num_workers
        self.mode = mode
        self._executor = None

    def map(self, fn):
        if self.mode == 'sequential' or self.num_workers == 1:
            return [fn(p) for p in range(self.num_workers)]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.num_workers)
        return list(self._executor.map(fn, range(self.num_workers)))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# Collectives. Each takes one contribution per worker and returns what each
# worker holds afterwards.

def _check_same_shape(tensors):
    shapes = {np.shape(t) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"workers contributed different shapes: {sorted(shapes)}")


def all_gather(tensors, stats=None):
    _check_same_shape(tensors)
    arrays = [np.asarray(t) for t in tensors]
    joined = np.concatenate(arrays, axis=0)
    if stats is not None:
        stats.add('bytes_allgather', arrays[0].nbytes * (len(arrays) - 1))
    return [joined.copy() for _ in arrays]


def _rank_order_sum(arrays):
    acc = np.array(arrays[0], copy=True)
    for a in arrays[1:]:
        acc = acc + a
    return acc


def all_reduce_sum(tensors, stats=None):
    _check_same_shape(tensors)
    arrays = [np.asarray(t) for t in tensors]
    total = _rank_order_sum(arrays)
    if stats is not None:
        p = len(arrays)
        # ring all-reduce moves 2(P-1)/P of the payload per worker
        stats.add('bytes_allreduce', 2 * (p - 1) * arrays[0].nbytes // p)
    return [total.copy() for _ in arrays]


def scalar_reduce(values, op='sum', stats=None):
    """Reduce per-row scalars (one vector per worker) with 'sum' or 'max'."""
    _check_same_shape(values)
    arrays = [np.asarray(v) for v in values]
    if op == 'max':
        acc = np.array(arrays[0], copy=True)
        for a in arrays[1:]:
            acc = np.maximum(acc, a)
    elif op == 'sum':
        acc = _rank_order_sum(arrays)
    else:
        raise InvalidParameter(f"unknown reduction {op!r}")
    if stats is not None:
        stats.add('bytes_allreduce', arrays[0].nbytes * (len(arrays) - 1))
    return acc


def broadcast(value, num_workers, stats=None):
    value = np.asarray(value)
    if stats is not None:
        for worker in range(1, num_workers):
            stats.add('bytes_allgather', value.nbytes, worker=worker)
    return [value.copy() for _ in range(num_workers)]


def distributed_softmax_xent(shard_logits, labels, shard_columns=None, stats=None, num_classes=None):
    """
    Softmax cross-entropy over class-sharded logits.

    Two per-row scalar reductions (global max, then global exp-sum after the
    max subtraction) plus one for the label logit; every worker gets the same
    loss and the gradient slice for its own columns. ``shard_columns`` lists
    the global class id of each shard's columns (contiguous blocks when
    omitted); with explicit columns, ``num_classes`` separates labels that
    do not exist from labels that are merely not active.
    """
    logits = [as_dense(l) for l in shard_logits]
    rows = {l.shape[0] for l in logits}
    if len(rows) != 1:
        raise ShapeMismatch(f"shards disagree on the batch size: {sorted(rows)}")
    m = rows.pop()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ShapeMismatch(f"{m} logit rows but {labels.size} labels")
    p_count = len(logits)

    if shard_columns is None:
        starts = np.concatenate([[0], np.cumsum([l.shape[1] for l in logits])])
        check_labels(labels, int(starts[-1]))
        owner = np.searchsorted(starts, labels, side='right') - 1
        local = labels - starts[owner]
    else:
        if num_classes is not None:
            check_labels(labels, num_classes)
        columns = [np.asarray(c, dtype=np.int64) for c in shard_columns]
        owner = np.full(m, -1, dtype=np.int64)
        local = np.zeros(m, dtype=np.int64)
        for p, cols in enumerate(columns):
            if cols.size != logits[p].shape[1]:
                raise ShapeMismatch(f"shard {p}: {cols.size} column ids for {logits[p].shape[1]} columns")
            if cols.size == 0:
                continue
            pos = np.minimum(np.searchsorted(cols, labels), cols.size - 1)
            hit = cols[pos] == labels
            owner[hit] = p
            local[hit] = pos[hit]
        if np.any(owner < 0):
            missing = labels[np.flatnonzero(owner < 0)[0]]
            if missing < 0:
                raise LabelOutOfRange(missing, max(int(c.max()) + 1 if c.size else 0 for c in columns))
            raise LabelNotActive(missing)

    row_max = [np.max(l, axis=1) if l.shape[1] else np.full(m, -np.inf, dtype=l.dtype) for l in logits]
    gmax = scalar_reduce(row_max, 'max', stats)
    shifted = [l - gmax[:, None] for l in logits]
    exp = [np.exp(s) for s in shifted]
    total = scalar_reduce([np.sum(e, axis=1) for e in exp], 'sum', stats)

    rows_idx = np.arange(m)
    label_parts = []
    for p in range(p_count):
        part = np.zeros(m, dtype=logits[p].dtype)
        mine = owner == p
        part[mine] = shifted[p][rows_idx[mine], local[mine]]
        label_parts.append(part)
    label_shifted = scalar_reduce(label_parts, 'sum', stats)
    loss = float(np.mean(np.log(total) - label_shifted))

    results = []
    for p in range(p_count):
        grad = exp[p] / total[:, None]
        mine = owner == p
        grad[rows_idx[mine], local[mine]] -= 1
        grad /= m
        results.append(LossAndGrad(loss=loss, grad_logits=grad.astype(logits[p].dtype, copy=False)))
    return results


# Model state

def init_model(layer_sizes, num_classes, seed):
    """Feature extractor plus unit-norm class weights, all float32."""
    rng = np.random.default_rng(seed)
    mlp = init_mlp(layer_sizes, rng)
    fc = rng.standard_normal((num_classes, layer_sizes[-1])).astype(np.float32)
    fc = l2_normalize_rows(fc)
    return {'mlp': mlp, 'fc': fc}


def flat_params(mlp):
    return [(f"{i}.{name}", layer[name]) for i, layer in enumerate(mlp) for name in ('weight', 'bias')]


def flat_grads(grads):
    return [g for layer in grads for g in (layer['weight'], layer['bias'])]


def _set_flat(mlp, arrays):
    for i, layer in enumerate(mlp):
        layer['weight'] = arrays[2 * i]
        layer['bias'] = arrays[2 * i + 1]


@dataclass
class HybridModelState:
    mlp: list
    fc: list
    mlp_velocity: list
    fc_velocity: list
    mlp_adam: list
    fc_adam: list
    compression: list
    step: int = 0


def shard_model(model, topology, sparsity_ratio=None, momentum=0.9, chunk_size=4096):
    """Replicate the feature extractor and split the class weights across workers."""
    p_count = topology.num_workers
    mlp = [copy.deepcopy(model['mlp']) for _ in range(p_count)]
    fc = [block.copy() for block in topology.shard_layout.split_rows(model['fc'])]
    return HybridModelState(
        mlp=mlp,
        fc=fc,
        mlp_velocity=[[np.zeros_like(a) for _, a in flat_params(m)] for m in mlp],
        fc_velocity=[np.zeros_like(w) for w in fc],
        mlp_adam=[[{} for _ in flat_params(m)] for m in mlp],
        fc_adam=[{} for _ in fc],
        compression=[
            CompressionState(sparsity_ratio, momentum, chunk_size) if sparsity_ratio is not None else None
            for _ in range(p_count)
        ],
    )


def gather_model(state):
    return {'mlp': copy.deepcopy(state.mlp[0]), 'fc': np.concatenate(state.fc)}


@dataclass
class StepConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    scale: float = 30.0
    softmax_mode: str = 'full'
    m_active: Optional[int] = None
    selection_seed: int = 0
    accumulation_steps: int = 1
    sparsify: bool = False
    sparsity_ratio: float = 0.99
    lars: Optional[LarsConfig] = None
    optimizer: str = 'sgd'
    micro_batches: int = 1
    cost_model: dict = field(default_factory=lambda: dict(DEFAULT_COST_MODEL))
    mode: str = 'sequential'

    def __post_init__(self):
        if self.softmax_mode not in ('full', 'knn'):
            raise InvalidParameter(f"softmax_mode must be 'full' or 'knn', got {self.softmax_mode!r}")
        if self.softmax_mode == 'knn' and not self.m_active:
            raise InvalidParameter("knn softmax needs m_active")
        if self.optimizer not in ('sgd', 'adam'):
            raise InvalidParameter(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.optimizer == 'adam' and self.sparsify:
            raise InvalidParameter("gradient sparsification runs with the momentum-SGD optimizer only")
        if self.accumulation_steps < 1 or self.micro_batches < 1:
            raise InvalidParameter("accumulation_steps and micro_batches must be positive")


def _layer_rate(cfg, lr, param, grad):
    if cfg.lars is None:
        return lr
    return lr * lars_local_lr(cfg.lars, float(np.linalg.norm(param)), float(np.linalg.norm(grad)))


def _row_update(cfg, lr, w, grad, rows, velocity, adam_state):
    """Update only ``rows`` of a class-weight block; other rows stay untouched."""
    if rows.size == 0:
        return
    if cfg.optimizer == 'adam':
        sub = {'m': adam_state['m'][rows], 'v': adam_state['v'][rows], 't': adam_state['t']} \
            if 'm' in adam_state else {}
        w[rows] = adam_step(w[rows], grad[rows], lr, sub, weight_decay=cfg.weight_decay)
        if 'm' not in adam_state:
            adam_state.update(m=np.zeros_like(w), v=np.zeros_like(w), t=0)
        adam_state['m'][rows] = sub['m']
        adam_state['v'][rows] = sub['v']
        adam_state['t'] = sub['t']
    else:
        new_w, new_v = sgd_momentum_step(w[rows], grad[rows], lr, cfg.momentum,
                                         cfg.weight_decay, velocity[rows])
        w[rows] = new_w
        velocity[rows] = new_v


def _select(cfg, graphs, labels, num_classes, stats, p_count):
    if graphs is None:
        raise InvalidParameter("knn softmax needs the KNN graph (or its compressed shards)")
    if stats is not None and not hasattr(graphs, 'neighbors'):
        # every shard answers quick access; the slices travel to rank 0
        for cg in graphs[1:]:
            stats.add('bytes_allgather', int(np.sum(cg.k_per_class[labels])) * 16, worker=0)
    active = select_active_classes(graphs, labels, SelectionConfig(cfg.m_active, cfg.selection_seed), num_classes)
    broadcast(active.class_indices, p_count, stats)
    return active


def _micro_step(topology, state, xs, ys, cfg, graphs, stats, pool):
    """Forward and backward for one micro-batch; returns per-worker gradients."""
    p_count = topology.num_workers
    layout = topology.shard_layout
    b = xs.shape[0] // p_count
    local_x = [xs[p * b:(p + 1) * b] for p in range(p_count)]
    local_y = [ys[p * b:(p + 1) * b] for p in range(p_count)]
    chunks = np.array_split(np.arange(b), min(cfg.micro_batches, b))

    # 1. feature extraction, one pipeline micro-batch at a time
    def fe_forward(p):
        outs = [mlp_forward(state.mlp[p], local_x[p][idx]) for idx in chunks]
        return [o[0] for o in outs], [o[1] for o in outs]

    fwd = pool.map(fe_forward)
    # 2. gather each micro-batch's features as soon as it is ready
    gathered = [all_gather([fwd[p][0][c] for p in range(p_count)], stats) for c in range(len(chunks))]
    labels_all = all_gather(local_y, stats)

    def canonical(q):
        pieces = []
        for p in range(p_count):
            for c, idx in enumerate(chunks):
                size = idx.size
                pieces.append(gathered[c][q][p * size:(p + 1) * size])
        return np.concatenate(pieces)

    features_all = pool.map(canonical)

    # the whole local batch's cache, rebuilt from the micro-batch caches
    def merge_cache(p):
        caches = fwd[p][1]
        return {
            'inputs': [np.concatenate([c['inputs'][i] for c in caches]) for i in range(len(caches[0]['inputs']))],
            'output': np.concatenate([c['output'] for c in caches]),
        }

    caches = pool.map(merge_cache)

    labels_global = labels_all[0]
    active = None
    if cfg.softmax_mode == 'knn':
        active = _select(cfg, graphs, labels_global, topology.num_classes, stats, p_count)

    def shard_columns(p):
        owned = layout.classes_of(p)
        if active is None:
            return owned
        return np.intersect1d(owned, active.class_indices, assume_unique=True)

    columns = [shard_columns(p) for p in range(p_count)]

    # 3. shard fc forward on the gathered features
    def fc_forward(p):
        fn = l2_normalize_rows(features_all[p])
        local_cols = columns[p] - layout.bounds[p]
        w_sub = state.fc[p][local_cols]
        if local_cols.size:
            wn = l2_normalize_rows(w_sub)
            logits = cfg.scale * matmul(fn, wn, transpose_b=True)
        else:
            wn = np.empty((0, fn.shape[1]), dtype=fn.dtype)
            logits = np.empty((fn.shape[0], 0), dtype=fn.dtype)
        return fn, local_cols, w_sub, wn, logits

    fc_out = pool.map(fc_forward)
    # 4. distributed softmax
    losses = distributed_softmax_xent([o[4] for o in fc_out], labels_global, columns, stats,
                                      num_classes=layout.num_classes)

    # 5. shard fc backward
    def fc_backward(p):
        fn, local_cols, w_sub, wn, _ = fc_out[p]
        g = losses[p].grad_logits
        grad_shard = np.zeros_like(state.fc[p])
        if local_cols.size == 0:
            return np.zeros_like(fn), grad_shard, local_cols
        d_fn = cfg.scale * matmul(g, wn)
        d_wn = cfg.scale * matmul(g.T, fn)
        grad_shard[local_cols] = l2_normalize_backward(w_sub, d_wn)
        return d_fn, grad_shard, local_cols

    fc_back = pool.map(fc_backward)
    # merge the feature gradient: gather every shard's partial, sum, keep own rows
    merged = all_gather([o[0] for o in fc_back], stats)
    rows = features_all[0].shape[0]

    # 6. feature extractor backward
    def fe_backward(p):
        parts = [merged[p][q * rows:(q + 1) * rows] for q in range(p_count)]
        d_fn = _rank_order_sum(parts)[p * b:(p + 1) * b]
        own = features_all[p][p * b:(p + 1) * b]
        d_feat = l2_normalize_backward(own, d_fn)
        grads, _ = mlp_backward(state.mlp[p], caches[p], d_feat)
        return flat_grads(grads)

    fe_grads = pool.map(fe_backward)
    return {
        'loss': losses[0].loss,
        'fe_grads': fe_grads,
        'fc_grads': [o[1] for o in fc_back],
        'fc_rows': [o[2] for o in fc_back],
        'active': active,
    }


def train_step_hybrid(topology, state, features, labels, cfg, graphs=None, stats=None, pool=None):
    """
    One synchronous hybrid-parallel optimizer step; updates ``state`` in place.

    The global batch is split into ``cfg.accumulation_steps`` micro-batches
    whose gradients are accumulated before a single synchronization round.
    Returns a dict with the state, mean loss, CommStats, active sets,
    achieved sparsity and the pipeline schedule of the step.
    """
    p_count = topology.num_workers
    features = as_dense(features)
    labels = check_labels(labels, topology.num_classes)
    n = cfg.accumulation_steps
    if features.shape[0] != labels.size:
        raise ShapeMismatch(f"{features.shape[0]} samples but {labels.size} labels")
    if features.shape[0] == 0 or features.shape[0] % (p_count * n):
        raise InvalidParameter(
            f"batch of {features.shape[0]} is not divisible by {p_count} workers x {n} accumulation steps"
        )
    stats = CommStats(p_count) if stats is None else stats
    own_pool = pool is None
    pool = WorkerPool(p_count, cfg.mode) if own_pool else pool
    try:
        micro = features.shape[0] // n
        results = []
        for j in range(n):
            sl = slice(j * micro, (j + 1) * micro)
            results.append(_micro_step(topology, state, features[sl], labels[sl], cfg, graphs, stats, pool))

        fe_grads = [accumulate_gradients(n, [r['fe_grads'][p] for r in results]) for p in range(p_count)]
        fc_grads = [accumulate_gradients(n, [r['fc_grads'][p] for r in results]) for p in range(p_count)]
        fc_rows = [np.unique(np.concatenate([r['fc_rows'][p] for r in results])) for p in range(p_count)]

        achieved = _sync_and_update(topology, state, fe_grads, cfg, stats, pool)
        _update_fc(topology, state, fc_grads, fc_rows, cfg, stats, pool)
        stats.add('sync_rounds', 1)

        schedule, pipe_stats = pipeline_schedule(topology, cfg.micro_batches, cfg.cost_model)
        stats.add('overlap_ticks', pipe_stats.overlap_ticks[0] * n)
        stats.add('total_ticks', pipe_stats.total_ticks[0] * n)
    finally:
        if own_pool:
            pool.close()

    state.step += 1
    loss = float(np.mean([r['loss'] for r in results]))
    logger.debug("hybrid step %d: loss=%.5f sparsity=%.4f", state.step, loss, achieved)
    return {
        'state': state,
        'loss': loss,
        'stats': stats,
        'active': [r['active'] for r in results],
        'achieved_sparsity': achieved,
        'schedule': schedule,
    }


def _sync_and_update(topology, state, fe_grads, cfg, stats, pool):
    """Data-parallel gradient synchronization and the feature extractor update."""
    p_count = topology.num_workers
    names = [name for name, _ in flat_params(state.mlp[0])]
    params = [[a for _, a in flat_params(m)] for m in state.mlp]

    if cfg.sparsify:
        # the summed decay term must equal the dense path's single weight_decay * params
        decay = cfg.weight_decay / p_count

        def compress(p):
            messages = []
            for i in range(len(names)):
                g = fe_grads[p][i] + decay * params[p][i]
                # wire layer id is the position in flat_params order
                messages.append(compress_step(state.compression[p], i, g, cfg.sparsity_ratio))
            return messages

        sparse = pool.map(compress)
        emitted = sum(s.indices.size for s in sparse[0])
        total = sum(s.dense_len for s in sparse[0])
        for i in range(len(names)):
            wire = max(len(encode_sparse(sparse[p][i])) for p in range(p_count))
            stats.add('bytes_allreduce', wire * (p_count - 1))
        summed = [
            _rank_order_sum([densify(sparse[p][i]) for p in range(p_count)]).reshape(params[0][i].shape)
            for i in range(len(names))
        ]

        def apply(p):
            new = []
            for i in range(len(names)):
                lr = _layer_rate(cfg, cfg.lr, params[p][i], summed[i])
                new.append((params[p][i] - np.float32(lr) * summed[i]).astype(params[p][i].dtype))
            _set_flat(state.mlp[p], new)

        pool.map(apply)
        return 1.0 - emitted / total if total else 0.0

    summed = [all_reduce_sum([fe_grads[p][i] for p in range(p_count)], stats)[0] for i in range(len(names))]

    def apply(p):
        new = []
        for i in range(len(names)):
            lr = _layer_rate(cfg, cfg.lr, params[p][i], summed[i])
            if cfg.optimizer == 'adam':
                new.append(adam_step(params[p][i], summed[i], lr, state.mlp_adam[p][i],
                                     weight_decay=cfg.weight_decay))
            else:
                w, v = sgd_momentum_step(params[p][i], summed[i], lr, cfg.momentum,
                                         cfg.weight_decay, state.mlp_velocity[p][i])
                state.mlp_velocity[p][i] = v
                new.append(w)
        _set_flat(state.mlp[p], new)

    pool.map(apply)
    return 0.0


def _update_fc(topology, state, fc_grads, fc_rows, cfg, stats, pool):
    """Local shard updates; LARS norms for the whole layer come from scalar reductions."""
    lr = cfg.lr
    if cfg.lars is not None:
        w_sq = scalar_reduce([np.array([np.sum(w.astype(np.float64) ** 2)]) for w in state.fc], 'sum', stats)
        g_sq = scalar_reduce([np.array([np.sum(g.astype(np.float64) ** 2)]) for g in fc_grads], 'sum', stats)
        lr = cfg.lr * lars_local_lr(cfg.lars, float(np.sqrt(w_sq[0])), float(np.sqrt(g_sq[0])))

    def apply(p):
        _row_update(cfg, lr, state.fc[p], fc_grads[p], fc_rows[p], state.fc_velocity[p], state.fc_adam[p])

    pool.map(apply)


def single_worker_step(model, features, labels, cfg, graph=None, opt=None):
    """
    Plain one-process training step, the oracle for the hybrid simulator.

    Supports full or KNN softmax, momentum SGD with weight decay and LARS;
    no accumulation, sparsification or Adam. ``model`` is updated in place;
    ``opt`` carries the momentum buffers between calls.
    """
    if cfg.accumulation_steps != 1 or cfg.sparsify or cfg.optimizer != 'sgd':
        raise InvalidParameter("the reference step covers plain momentum SGD only")
    features = as_dense(features)
    n_classes = model['fc'].shape[0]
    labels = check_labels(labels, n_classes)
    if opt is None:
        opt = {'mlp': [np.zeros_like(a) for _, a in flat_params(model['mlp'])],
               'fc': np.zeros_like(model['fc'])}

    feats, cache = mlp_forward(model['mlp'], features)
    fn = l2_normalize_rows(feats)
    if cfg.softmax_mode == 'knn':
        active = select_active_classes(graph, labels, SelectionConfig(cfg.m_active, cfg.selection_seed), n_classes)
        rows = active.class_indices
    else:
        rows = np.arange(n_classes)
    wn = np.zeros_like(model['fc'])
    wn[rows] = l2_normalize_rows(model['fc'][rows])
    result = knn_softmax_forward_backward(fn, wn, labels, ActiveSet(rows, True), cfg.scale)

    d_feat = l2_normalize_backward(feats, result.grad_features)
    grads, _ = mlp_backward(model['mlp'], cache, d_feat)
    grad_fc = np.zeros_like(model['fc'])
    grad_fc[rows] = l2_normalize_backward(model['fc'][rows], result.grad_weights[rows])

    params = [a for _, a in flat_params(model['mlp'])]
    new = []
    for i, (param, grad) in enumerate(zip(params, flat_grads(grads))):
        lr = _layer_rate(cfg, cfg.lr, param, grad)
        w, v = sgd_momentum_step(param, grad, lr, cfg.momentum, cfg.weight_decay, opt['mlp'][i])
        opt['mlp'][i] = v
        new.append(w)
    _set_flat(model['mlp'], new)

    lr = cfg.lr
    if cfg.lars is not None:
        lr = cfg.lr * lars_local_lr(cfg.lars, float(np.linalg.norm(model['fc'].astype(np.float64))),
                                    float(np.linalg.norm(grad_fc.astype(np.float64))))
    _row_update(cfg, lr, model['fc'], grad_fc, rows, opt['fc'], {})
    return {'model': model, 'opt': opt, 'loss': result.loss, 'active_rows': rows}


# Pipeline scheduling

@dataclass
class PipelineSchedule:
    micro_batches: int
    overlapped: bool
    events: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame(self.events, columns=['worker', 'stage', 'micro_batch', 'start_tick', 'end_tick'])

    def export(self, filename):
        df = self.to_frame()
        df.to_csv(filename, index=False)
        logger.info("pipeline event log (%d events) written to %s", len(df), filename)
        return df

    @property
    def total_ticks(self):
        return max((e[4] for e in self.events), default=0)


def _event_order(micro_batches, overlapped):
    m = range(micro_batches)
    if not overlapped:
        return [(stage, i) for stage in STAGES for i in m]
    order = [('fe_fwd', i) for i in m] + [('gather', i) for i in m]
    for i in m:
        order += [('fc_fwd', i), ('softmax', i), ('fc_bwd', i), ('reduce', i)]
    return order + [('fe_bwd', i) for i in m]


def pipeline_schedule(topology, micro_batches, cost_model=None, overlapped=True):
    """
    Event log of one step under an integer per-stage tick cost.

    The baseline runs stage after stage over all micro-batches, so the fc
    shards idle until every feature is gathered. The overlapped variant
    gathers each micro-batch as soon as its features exist and overlaps the
    feature-gradient merge of one micro-batch with fc work on the next.
    Every event starts once its predecessor stage for the same micro-batch
    has ended and its resource (compute or communication) is free.
    """
    if micro_batches < 1:
        raise InvalidParameter("micro_batches must be at least 1")
    costs = dict(DEFAULT_COST_MODEL)
    costs.update(cost_model or {})
    unknown = set(costs) - set(STAGES)
    if unknown:
        raise InvalidParameter(f"cost model names unknown stages: {sorted(unknown)}")

    end = {}
    free = {'compute': 0, 'comm': 0}
    barrier = 0
    timeline = []
    previous_stage = None
    for stage, i in _event_order(micro_batches, overlapped):
        resource = 'comm' if stage in COMM_STAGES else 'compute'
        if not overlapped and stage != previous_stage:
            barrier = max([0] + list(end.values()))
            previous_stage = stage
        idx = STAGES.index(stage)
        ready = end[(STAGES[idx - 1], i)] if idx else 0
        start = max(ready, free[resource], barrier if not overlapped else 0)
        finish = start + int(costs[stage])
        end[(stage, i)] = finish
        free[resource] = finish
        timeline.append((stage, i, start, finish))

    schedule = PipelineSchedule(micro_batches=micro_batches, overlapped=overlapped)
    for worker in range(topology.num_workers):
        schedule.events += [(worker, stage, i, s, e) for stage, i, s, e in timeline]

    total = schedule.total_ticks
    busy = {'compute': np.zeros(total, dtype=bool), 'comm': np.zeros(total, dtype=bool)}
    for stage, _, s, e in timeline:
        busy['comm' if stage in COMM_STAGES else 'compute'][s:e] = True
    overlap = int(np.sum(busy['compute'] & busy['comm']))

    stats = CommStats(topology.num_workers)
    stats.add('overlap_ticks', overlap)
    stats.add('total_ticks', total)
    return schedule, stats


def validate_schedule(schedule):
    """Return a list of dependency or resource violations (empty when sound)."""
    violations = []
    frame = schedule.to_frame()
    for worker, events in frame.groupby('worker'):
        ends = {(r.stage, r.micro_batch): r.end_tick for r in events.itertuples()}
        for r in events.itertuples():
            idx = STAGES.index(r.stage)
            if idx and r.start_tick < ends[(STAGES[idx - 1], r.micro_batch)]:
                violations.append(
                    f"worker {worker}: {r.stage}({r.micro_batch}) starts before {STAGES[idx - 1]}({r.micro_batch}) ends"
                )
        for resource_stages in (COMM_STAGES, tuple(s for s in STAGES if s not in COMM_STAGES)):
            on = events[events['stage'].isin(resource_stages)].sort_values(['start_tick', 'end_tick'])
            busy_until = 0
            for r in on.itertuples():
                if r.start_tick < busy_until and r.end_tick > r.start_tick:
                    violations.append(f"worker {worker}: {r.stage}({r.micro_batch}) overlaps on its resource")
                busy_until = max(busy_until, r.end_tick)
    return violations


def compare_pipelines(topology, micro_batches, cost_model=None):
    """Baseline and overlapped schedules side by side, as a summary DataFrame."""
    rows = []
    out = {}
    for overlapped in (False, True):
        schedule, stats = pipeline_schedule(topology, micro_batches, cost_model, overlapped)
        key = 'overlapped' if overlapped else 'baseline'
        out[key] = (schedule, stats)
        rows.append({'variant': key, 'micro_batches': micro_batches,
                     'total_ticks': int(stats.total_ticks[0]), 'overlap_ticks': int(stats.overlap_ticks[0])})
    out['summary'] = pd.DataFrame(rows)
    return out
