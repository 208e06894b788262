import logging
import sqlite3
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score

from errors import InvalidParameter, ShapeMismatch

logger = logging.getLogger(__name__)

STEP_COLUMNS = ['step', 'epoch', 'loss', 'lr', 'batch_size', 'achieved_sparsity', 'sync_rounds']
EPOCH_COLUMNS = ['epoch', 'test_accuracy', 'graph_rebuild_seconds', 'mean_loss']


def top1_accuracy(labels, predictions):
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ShapeMismatch(f"{labels.size} labels but {predictions.size} predictions")
    if labels.size == 0:
        return 0.0
    return float(accuracy_score(labels, predictions))


@dataclass
class RunMetrics:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def log_step(self, step, epoch, loss, lr, batch_size, achieved_sparsity=0.0, sync_rounds=0):
        if self.steps and step <= self.steps[-1]['step']:
            raise InvalidParameter(f"step {step} does not follow step {self.steps[-1]['step']}")
        self.steps.append({'step': step, 'epoch': epoch, 'loss': float(loss), 'lr': float(lr),
                           'batch_size': int(batch_size), 'achieved_sparsity': float(achieved_sparsity),
                           'sync_rounds': int(sync_rounds)})

    def log_epoch(self, epoch, test_accuracy, graph_rebuild_seconds=0.0):
        losses = [s['loss'] for s in self.steps if s['epoch'] == epoch]
        self.epochs.append({'epoch': epoch, 'test_accuracy': float(test_accuracy),
                            'graph_rebuild_seconds': float(graph_rebuild_seconds),
                            'mean_loss': float(np.mean(losses)) if losses else float('nan')})

    def step_frame(self):
        return pd.DataFrame(self.steps, columns=STEP_COLUMNS)

    def epoch_frame(self):
        return pd.DataFrame(self.epochs, columns=EPOCH_COLUMNS)

    @property
    def final_accuracy(self):
        return self.epochs[-1]['test_accuracy'] if self.epochs else float('nan')

    def export(self, filename_prefix):
        """Write ``<prefix>_steps.csv`` and ``<prefix>_epochs.csv``."""
        self.step_frame().to_csv(f'{filename_prefix}_steps.csv', index=False)
        self.epoch_frame().to_csv(f'{filename_prefix}_epochs.csv', index=False)
        logger.info("metrics exported to %s_*.csv", filename_prefix)


def export_run_database(metrics, db_path, comm_stats=None):
    """SQLite copy of a run's metrics with a per-epoch summary view."""
    conn = sqlite3.connect(db_path)
    try:
        metrics.step_frame().to_sql('steps', conn, if_exists='replace', index=False)
        metrics.epoch_frame().to_sql('epochs', conn, if_exists='replace', index=False)
        if comm_stats is not None:
            comm_stats.to_frame().to_sql('comm_stats', conn, if_exists='replace', index=False)
        conn.execute('CREATE INDEX IF NOT EXISTS idx_steps_epoch ON steps("epoch")')
        conn.execute('DROP VIEW IF EXISTS epoch_summary')
        conn.execute('''
        CREATE VIEW epoch_summary AS
        SELECT
            s."epoch",
            COUNT(*) AS steps,
            MIN(s."batch_size") AS min_batch_size,
            MAX(s."batch_size") AS max_batch_size,
            AVG(s."loss") AS mean_loss,
            e."test_accuracy"
        FROM steps s
        LEFT JOIN epochs e ON s."epoch" = e."epoch"
        GROUP BY s."epoch"
        ORDER BY s."epoch"
        ''')
        conn.commit()
    finally:
        conn.close()
    logger.info("run database written to %s", db_path)
