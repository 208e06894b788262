#!/usr/bin/env python3
"""
Extreme-classification training simulator: KNN softmax, hybrid parallelism,
layer-wise top-k gradient sparsification and FCCS schedules.

Subcommands: gen, train, eval, classify, build-graph, dump-schedule,
bench-topk, bench-pipeline. Run ``main.py <command> --help`` for flags.
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import fields
from datetime import datetime

import numpy as np
import pandas as pd
pd.set_option('display.float_format', '{:,.4f}'.format)

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from config import ExperimentConfig, config_hash, load_config, parse_set_args  # noqa: E402
from core_math import l2_normalize_rows  # noqa: E402
from data_loading import TEST_FILE, generate_synthetic, load_checkpoint, load_dataset, read_dataset  # noqa: E402
from errors import ConfigError, XknnError  # noqa: E402
from fccs import export_schedule  # noqa: E402
from knn_graph import build_graph_bruteforce, build_graph_ring, save_graph  # noqa: E402
from parallel_sim import WorkerTopology, compare_pipelines, init_model, validate_schedule  # noqa: E402
from sparsify import keep_count, topk_divide_conquer, topk_full_sort  # noqa: E402
from training import (classify_retrieval, evaluate, policy_kwargs, schedule_from_config,  # noqa: E402
                      train)
from visualization import plot_pipeline, plot_schedule  # noqa: E402

logger = logging.getLogger('xknn')


def add_config_flags(parser):
    parser.add_argument('--config', help='flat key = value config file')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override any config key (repeatable)')
    group = parser.add_argument_group('experiment config')
    for f in fields(ExperimentConfig):
        group.add_argument('--' + f.name.replace('_', '-'), dest=f.name, default=None, metavar='VALUE')


def resolve_config(args):
    overrides = parse_set_args(args.set)
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return load_config(args.config, overrides)


def cmd_gen(args, cfg):
    out = args.out or os.path.join(cfg.output_dir, 'data')
    print(f"\n📊 Generating synthetic dataset ({cfg.synthetic_classes:,} classes, D={cfg.feature_dim})...")
    paths = generate_synthetic(cfg, out)
    for name, path in paths.items():
        print(f"   ✅ {name}: {path}")
    print(f"   Spread: {cfg.spread} | Seed: {cfg.seed}")


def cmd_train(args, cfg):
    print("\n🚀 TRAINING")
    print("=" * 60)
    print(f"   Softmax: {cfg.softmax_mode} | Policy: {cfg.lr_policy} | Workers: {cfg.num_workers}")
    print(f"   Epochs: {cfg.epochs} | B0: {cfg.b0} | Sparsity: {cfg.sparsity_ratio}")
    start = time.perf_counter()
    result = train(cfg, plots=not args.no_plots)
    elapsed = time.perf_counter() - start
    epochs = result['metrics'].epoch_frame()
    print(f"\n📊 Epoch results:")
    for r in epochs.itertuples():
        print(f"   Epoch {r.epoch:>3}: accuracy {r.test_accuracy * 100:6.2f}% | loss {r.mean_loss:.4f}"
              f" | graph rebuild {r.graph_rebuild_seconds:.2f}s")
    print(f"\n✅ Training complete in {elapsed:.1f}s")
    print(f"   🎯 Final test accuracy: {result['final_accuracy'] * 100:.2f}%")
    print(f"   💾 Checkpoint: {result['checkpoint']}")
    print(f"   📁 Outputs: {result['output_dir']}")


def _test_set(args, cfg):
    """``(batch, num_classes)`` from ``--data`` or the configured dataset."""
    if args.data:
        return read_dataset(os.path.join(args.data, TEST_FILE) if os.path.isdir(args.data) else args.data)
    _, test, num_classes = load_dataset(cfg)
    return test, num_classes


def _checked_model(path, cfg, num_classes):
    model, _ = load_checkpoint(path, expected_hash=config_hash(cfg, num_classes))
    return model


def cmd_eval(args, cfg):
    test, num_classes = _test_set(args, cfg)
    accuracy = evaluate(_checked_model(args.checkpoint, cfg, num_classes), test)
    print(f"\n🎯 Top-1 accuracy on {test.labels.size:,} samples: {accuracy * 100:.2f}%")


def cmd_classify(args, cfg):
    queries, num_classes = _test_set(args, cfg)
    predictions = classify_retrieval(_checked_model(args.checkpoint, cfg, num_classes), queries.features)
    out = args.out or os.path.join(cfg.output_dir, 'predictions.csv')
    os.makedirs(os.path.dirname(out) or '.', exist_ok=True)
    pd.DataFrame({'query': np.arange(predictions.size), 'predicted_class': predictions,
                  'label': queries.labels}).to_csv(out, index=False)
    agree = float(np.mean(predictions == queries.labels)) if predictions.size else 0.0
    print(f"\n🔎 Classified {predictions.size:,} queries by nearest class embedding")
    print(f"   Agreement with labels: {agree * 100:.2f}%")
    print(f"   ✅ Predictions written to {out}")


def cmd_build_graph(args, cfg):
    _, _, num_classes = load_dataset(cfg)
    if args.checkpoint:
        model = _checked_model(args.checkpoint, cfg, num_classes)
    else:
        model = init_model(cfg.layer_sizes, num_classes, cfg.seed)
    w_norm = l2_normalize_rows(model['fc'])
    topology = WorkerTopology.create(cfg.num_workers, w_norm.shape[0])
    stats = {}
    start = time.perf_counter()
    graph = build_graph_ring(topology.shard_layout.split_rows(w_norm), cfg.knn_k, cfg.kprime,
                             threaded=cfg.sim_mode == 'threaded', stats=stats)
    elapsed = time.perf_counter() - start
    print(f"\n🕸️ KNN graph: N={graph.num_classes:,}, k={graph.k}, P={cfg.num_workers}, built in {elapsed:.2f}s")
    print(f"   Peak candidate entries per shard: {max(stats['peak_candidate_entries']):,}"
          f" (bound {max(stats['candidate_bound']):,})")
    if args.verify:
        exact = build_graph_bruteforce(w_norm, cfg.knn_k)
        print(f"   {'✅' if exact == graph else '❌'} ring build {'equals' if exact == graph else 'differs from'}"
              f" brute force")
    out = args.out or cfg.graph_cache or os.path.join(cfg.output_dir, 'graph.xknn')
    os.makedirs(os.path.dirname(out) or '.', exist_ok=True)
    save_graph(graph, out)
    print(f"   💾 Graph written to {out}")


def cmd_dump_schedule(args, cfg):
    schedule = schedule_from_config(cfg)
    n_train = args.n_train or cfg.synthetic_classes * cfg.samples_per_class
    out = args.out or os.path.join(cfg.output_dir, 'schedule.csv')
    os.makedirs(os.path.dirname(out) or '.', exist_ok=True)
    df = export_schedule(schedule, n_train, cfg.epochs, out, cfg.lr_policy, **policy_kwargs(cfg))
    print(f"\n📅 {cfg.lr_policy} schedule: {len(df):,} steps over {cfg.epochs} epochs")
    print(f"   Batch size: {df['batch_size'].min()} → {df['batch_size'].max()}")
    print(f"   Learning rate: {df['lr'].min():.5f} → {df['lr'].max():.5f}")
    print(f"   ✅ Written to {out}")
    if not args.no_plots:
        plot_schedule(df, os.path.splitext(out)[0] + '.png', title=f'{cfg.lr_policy} schedule')


def cmd_bench_topk(args, cfg):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    print(f"\n⏱️ Top-k selection, sparsity {args.sparsity}")
    for length in args.lengths:
        t = rng.standard_normal(length).astype(np.float32)
        k = keep_count(length, args.sparsity)
        timings = {}
        for name, fn in (('full_sort', lambda: topk_full_sort(t, k)),
                         ('divide_conquer', lambda: topk_divide_conquer(t, k))):
            start = time.perf_counter()
            for _ in range(args.repeats):
                result = fn()
            timings[name] = (time.perf_counter() - start) / args.repeats
            timings[name + '_indices'] = result[0]
        same = np.array_equal(timings.pop('full_sort_indices'), timings.pop('divide_conquer_indices'))
        rows.append({'length': length, 'k': k, 'full_sort_ms': timings['full_sort'] * 1e3,
                     'divide_conquer_ms': timings['divide_conquer'] * 1e3, 'identical': same})
        print(f"   len={length:>10,} k={k:>8,}: full {timings['full_sort'] * 1e3:8.2f} ms |"
              f" d&c {timings['divide_conquer'] * 1e3:8.2f} ms | {'✅' if same else '❌'} identical")
    out = args.out or os.path.join(cfg.output_dir, 'bench_topk.csv')
    os.makedirs(os.path.dirname(out) or '.', exist_ok=True)
    pd.DataFrame(rows).to_csv(out, index=False)
    print(f"   ✅ Written to {out}")


def cmd_bench_pipeline(args, cfg):
    topology = WorkerTopology.create(cfg.num_workers, max(cfg.synthetic_classes, cfg.num_workers))
    cost_model = {}
    for stage, ticks in parse_set_args(args.cost).items():
        if not ticks.isdigit():
            raise ConfigError(f"--cost {stage}: expected a non-negative tick count, got {ticks!r}")
        cost_model[stage] = int(ticks)
    result = compare_pipelines(topology, cfg.micro_batches, cost_model)
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    print(f"\n🔄 Pipeline, {cfg.micro_batches} micro-batches, {cfg.num_workers} workers")
    for variant in ('baseline', 'overlapped'):
        schedule, stats = result[variant]
        violations = validate_schedule(schedule)
        schedule.export(os.path.join(out_dir, f'pipeline_{variant}_events.csv'))
        stats.export(os.path.join(out_dir, f'pipeline_{variant}_stats.csv'))
        print(f"   {variant:>10}: {schedule.total_ticks} ticks, overlap {int(stats.overlap_ticks[0])}"
              f" | {'✅ valid' if not violations else '❌ ' + violations[0]}")
    result['summary'].to_csv(os.path.join(out_dir, 'pipeline_summary.csv'), index=False)
    if not args.no_plots:
        plot_pipeline({v: result[v][0] for v in ('baseline', 'overlapped')},
                      os.path.join(out_dir, 'pipeline.png'))
    print(f"   ✅ Event logs written to {out_dir}")


def build_parser():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--log-level', default='WARNING', help='DEBUG, INFO, WARNING or ERROR')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', help='write a synthetic train/test dataset')
    p.add_argument('--out', help='output directory (default <output_dir>/data)')
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser('train', help='train and write checkpoint + metrics')
    p.add_argument('--no-plots', action='store_true')
    p.set_defaults(func=cmd_train)

    for name, func, text in (('eval', cmd_eval, 'top-1 accuracy of a checkpoint'),
                             ('classify', cmd_classify, 'nearest-class-embedding predictions')):
        p = sub.add_parser(name, help=text)
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--data', help='dataset directory or .xds file (default: test split of the config)')
        if name == 'classify':
            p.add_argument('--out', help='predictions CSV')
        p.set_defaults(func=func)

    p = sub.add_parser('build-graph', help='ring-distributed KNN graph over class weights')
    p.add_argument('--checkpoint', help='take class weights from a checkpoint (default: fresh init)')
    p.add_argument('--verify', action='store_true', help='compare against the brute-force graph')
    p.add_argument('--out', help='graph file (default graph_cache, else <output_dir>/graph.xknn)')
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser('dump-schedule', help='per-step learning rate and batch size as CSV')
    p.add_argument('--n-train', type=int, help='training set size (default from the synthetic dataset settings)')
    p.add_argument('--out')
    p.add_argument('--no-plots', action='store_true')
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser('bench-topk', help='full sort vs divide-and-conquer top-k')
    p.add_argument('--lengths', type=int, nargs='+', default=[10 ** 4, 10 ** 5, 10 ** 6])
    p.add_argument('--sparsity', type=float, default=0.999)
    p.add_argument('--repeats', type=int, default=3)
    p.add_argument('--out')
    p.set_defaults(func=cmd_bench_topk)

    p = sub.add_parser('bench-pipeline', help='baseline vs overlapped micro-batch pipeline')
    p.add_argument('--cost', action='append', default=[], metavar='STAGE=TICKS')
    p.add_argument('--out', help='output directory')
    p.add_argument('--no-plots', action='store_true')
    p.set_defaults(func=cmd_bench_pipeline)

    for p in sub.choices.values():
        add_config_flags(p)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    print(f"Started: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as e:
        print(f'error code={e.code} message="{e}"', file=sys.stderr)
        return 2
    except XknnError as e:
        print(f'error code={e.code} message="{e}"', file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
