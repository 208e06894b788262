"""
End-to-end training, evaluation and retrieval-based classification.
"""

import logging
import math
import os
import time
from datetime import datetime

import numpy as np

from channels import CommStats
from config import config_hash, save_config
from core_math import LabeledBatch, as_dense, l2_normalize_rows, matmul, mlp_forward
from data_loading import load_checkpoint, load_dataset, save_checkpoint
from errors import GraphFormatError, ShapeMismatch
from fccs import FccsSchedule, LarsConfig, iterate_schedule
from knn_graph import build_graph_ring, compress_graph, graph_matches_weights, load_graph, save_graph
from knn_softmax import m_active_for
from metrics import RunMetrics, export_run_database, top1_accuracy
from parallel_sim import (StepConfig, WorkerPool, WorkerTopology, gather_model, init_model, shard_model,
                          train_step_hybrid)
from sparsify import sparsity_for_epoch
from visualization import plot_run_metrics

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'model.xck'


def schedule_from_config(cfg):
    return FccsSchedule.growth(cfg.eta0, cfg.b0, growth=cfg.batch_growth, t_final=cfg.t_final,
                               t_warm=cfg.t_warm, t_ini=cfg.t_ini,
                               increasing_variant=cfg.increasing_variant, unit=cfg.schedule_unit)


def policy_kwargs(cfg):
    return {'adam_lr': cfg.adam_lr, 'step_epochs': cfg.piecewise_step_epochs, 'factor': cfg.piecewise_factor}


class ClassEmbeddingIndex:
    """Exact nearest-class search over L2-normalized class weight vectors."""

    def __init__(self, class_weights):
        self.embeddings = l2_normalize_rows(class_weights)

    def __len__(self):
        return self.embeddings.shape[0]

    def scores(self, queries):
        queries = l2_normalize_rows(as_dense(queries, dtype=self.embeddings.dtype))
        if queries.shape[1] != self.embeddings.shape[1]:
            raise ShapeMismatch(f"queries have D={queries.shape[1]}, index has D={self.embeddings.shape[1]}")
        return matmul(queries, self.embeddings, transpose_b=True)

    def search(self, queries, k=1):
        """Top-``k`` class ids and cosine scores per query; ties go to the lower id."""
        scores = self.scores(queries)
        k = min(k, len(self))
        order = np.argsort(-scores, axis=1, kind='stable')[:, :k]
        return order, np.take_along_axis(scores, order, axis=1)


def embed(model, features):
    feats, _ = mlp_forward(model['mlp'], features)
    return feats


def predict(model, features):
    """Argmax over cosine logits."""
    feats = l2_normalize_rows(embed(model, features))
    w = l2_normalize_rows(model['fc'])
    if feats.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"features have D={feats.shape[1]}, class weights D={w.shape[1]}")
    return np.argmax(matmul(feats, w, transpose_b=True), axis=1)


def evaluate(model, test):
    """Top-1 accuracy of ``model`` (a dict or a checkpoint path) on ``test``."""
    if isinstance(model, str):
        model, _ = load_checkpoint(model)
    if test.features.shape[1] != model['mlp'][0]['weight'].shape[1]:
        raise ShapeMismatch(
            f"test set has D={test.features.shape[1]}, model expects {model['mlp'][0]['weight'].shape[1]}"
        )
    test.check_labels(model['fc'].shape[0])
    return top1_accuracy(test.labels, predict(model, test.features))


def classify_retrieval(model, query_features, k=1):
    """
    Deployment path: embed the queries and return the nearest class
    embedding (``k`` nearest when k > 1).
    """
    if isinstance(model, str):
        model, _ = load_checkpoint(model)
    ids, _ = ClassEmbeddingIndex(model['fc']).search(embed(model, query_features), k)
    return ids[:, 0] if k == 1 else ids


def _rebuild_graph(cfg, state, topology, cache=None):
    """
    Ring-build the graph over the current class weights and compress it per
    shard. With ``cache``, a stored graph is reused when it passes the spot
    check; otherwise the fresh graph is written there.
    """
    start = time.perf_counter()
    layout = topology.shard_layout
    w_norm = l2_normalize_rows(np.concatenate(state.fc))
    graph = None
    if cache and os.path.exists(cache):
        try:
            graph = load_graph(cache)
        except GraphFormatError as e:
            logger.warning("ignoring unreadable graph cache: %s", e)
        if graph is not None and (graph.k != cfg.knn_k or not graph_matches_weights(graph, w_norm)):
            logger.warning("graph cache %s does not match the current class weights, rebuilding", cache)
            graph = None
        elif graph is not None:
            logger.info("reusing cached KNN graph from %s", cache)
    if graph is None:
        graph = build_graph_ring(layout.split_rows(w_norm), cfg.knn_k, cfg.kprime,
                                 threaded=cfg.sim_mode == 'threaded')
        if cache:
            os.makedirs(os.path.dirname(cache) or '.', exist_ok=True)
            save_graph(graph, cache)
    compressed = [compress_graph(graph, layout, p) for p in range(topology.num_workers)]
    elapsed = time.perf_counter() - start
    logger.info("KNN graph ready in %.3fs (N=%d, k=%d)", elapsed, graph.num_classes, graph.k)
    return compressed, elapsed


def _step_batch(indices, num_workers, max_micro_batch):
    """Trim a batch to a multiple of workers x accumulation steps."""
    accumulation = max(1, math.ceil(indices.size / max_micro_batch))
    usable = indices.size - indices.size % (num_workers * accumulation)
    while usable == 0 and accumulation > 1:
        accumulation -= 1
        usable = indices.size - indices.size % (num_workers * accumulation)
    if usable < indices.size:
        logger.warning("trimmed batch of %d to %d to split across %d workers", indices.size, usable, num_workers)
    return indices[:usable], accumulation


def train(cfg, data=None, plots=True):
    """
    Run the configured experiment and write its artifacts to
    ``cfg.output_dir``: checkpoint, metrics CSVs, CommStats, the resolved
    config, a run database and a summary report.
    """
    train_set, test_set, num_classes = data if data is not None else load_dataset(cfg)
    train_set.check_labels(num_classes)
    topology = WorkerTopology.create(cfg.num_workers, num_classes)
    model = init_model(cfg.layer_sizes, num_classes, cfg.seed)
    state = shard_model(model, topology, cfg.sparsity_ratio if cfg.sparsity_ratio > 0 else None,
                        cfg.momentum, cfg.topk_chunk_size)
    schedule = schedule_from_config(cfg)
    lars = LarsConfig(cfg.lars_trust, cfg.weight_decay, cfg.lars_epsilon) if cfg.lars else None
    n_train = train_set.labels.size

    metrics = RunMetrics()
    stats = CommStats(cfg.num_workers)
    shuffle = np.random.default_rng(cfg.seed + 1)
    graphs, rebuild_seconds = None, 0.0
    current_epoch, perm, cursor = -1, None, 0

    def finish_epoch(epoch):
        acc = evaluate(gather_model(state), test_set)
        metrics.log_epoch(epoch, acc, rebuild_seconds)
        logger.info("epoch %d: test accuracy %.4f", epoch, acc)

    with WorkerPool(cfg.num_workers, cfg.sim_mode) as pool:
        for row in iterate_schedule(schedule, n_train, cfg.epochs, cfg.lr_policy, **policy_kwargs(cfg)):
            epoch = row['epoch']
            if epoch != current_epoch:
                if current_epoch >= 0:
                    finish_epoch(current_epoch)
                current_epoch, cursor = epoch, 0
                perm = shuffle.permutation(n_train)
                rebuild_seconds = 0.0
                if cfg.softmax_mode == 'knn' and epoch % cfg.graph_rebuild_epochs == 0:
                    # only the initial weights can match a graph cached by an earlier run
                    cache = cfg.graph_cache if epoch == 0 else None
                    graphs, rebuild_seconds = _rebuild_graph(cfg, state, topology, cache)

            batch_idx = perm[cursor:cursor + row['batch_size']]
            cursor += row['batch_size']
            batch_idx, accumulation = _step_batch(batch_idx, cfg.num_workers, cfg.max_micro_batch)
            if batch_idx.size == 0:
                logger.warning("step %d: nothing left to train on after trimming, skipped", row['step'])
                continue
            batch = LabeledBatch(train_set.features[batch_idx], train_set.labels[batch_idx])

            step_cfg = StepConfig(
                lr=row['lr'],
                momentum=cfg.momentum,
                weight_decay=cfg.weight_decay,
                scale=cfg.scale,
                softmax_mode=cfg.softmax_mode,
                m_active=m_active_for(num_classes, cfg.active_fraction, batch_idx.size // accumulation)
                if cfg.softmax_mode == 'knn' else None,
                selection_seed=cfg.selection_seed + row['step'],
                accumulation_steps=accumulation,
                sparsify=cfg.sparsity_ratio > 0,
                sparsity_ratio=sparsity_for_epoch(cfg.sparsity_ratio, epoch, cfg.sparsity_warmup_epochs),
                lars=lars,
                optimizer='adam' if cfg.lr_policy == 'adam' else 'sgd',
                micro_batches=cfg.micro_batches,
                mode=cfg.sim_mode,
            )
            result = train_step_hybrid(topology, state, batch.features, batch.labels, step_cfg,
                                       graphs=graphs, stats=stats, pool=pool)
            metrics.log_step(row['step'], epoch, result['loss'], row['lr'], row['batch_size'],
                             result['achieved_sparsity'], int(stats.sync_rounds[0]))
        if current_epoch >= 0:
            finish_epoch(current_epoch)

    final_model = gather_model(state)
    outputs = write_run_outputs(cfg, final_model, metrics, stats, num_classes, plots)
    return {
        'model': final_model,
        'metrics': metrics,
        'comm_stats': stats,
        'final_accuracy': metrics.final_accuracy,
        'num_classes': num_classes,
        **outputs,
    }


def write_run_outputs(cfg, model, metrics, stats, num_classes, plots=True):
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    checkpoint = os.path.join(out, CHECKPOINT_FILE)
    save_checkpoint(checkpoint, model, config_hash(cfg, num_classes))
    metrics.export(os.path.join(out, 'metrics'))
    stats.export(os.path.join(out, 'comm_stats.csv'))
    save_config(cfg, os.path.join(out, 'config.txt'))
    export_run_database(metrics, os.path.join(out, 'run.db'), stats)
    if plots:
        plot_run_metrics(metrics, os.path.join(out, 'training_curves.png'))

    report = f"""
TRAINING RUN SUMMARY
====================
Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}

Classes: {num_classes:,}
Softmax: {cfg.softmax_mode} (scale {cfg.scale})
Policy: {cfg.lr_policy}, {cfg.epochs} epochs, B0={cfg.b0}
Workers: {cfg.num_workers}, micro-batches {cfg.micro_batches}
Sparsity: {cfg.sparsity_ratio}

Steps: {len(metrics.steps):,}
Final test accuracy: {metrics.final_accuracy * 100:.2f}%
Bytes all-gathered per worker: {int(stats.bytes_allgather[0]):,}
Bytes all-reduced per worker: {int(stats.bytes_allreduce[0]):,}
Config hash: {config_hash(cfg, num_classes)}
"""
    with open(os.path.join(out, 'run_summary.txt'), 'w') as f:
        f.write(report)
    return {'checkpoint': checkpoint, 'output_dir': out}
