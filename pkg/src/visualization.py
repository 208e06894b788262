import logging

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)

STAGE_COLORS = {'fe_fwd': 'steelblue', 'gather': 'orange', 'fc_fwd': 'seagreen', 'softmax': 'purple',
                'fc_bwd': 'olive', 'reduce': 'red', 'fe_bwd': 'slategray'}


def _save(fig, filename):
    if filename:
        fig.savefig(filename, dpi=120, bbox_inches='tight')
        plt.close(fig)
        logger.info("figure written to %s", filename)
    return fig


def plot_schedule(schedule_df, filename=None, title='Learning rate and batch size'):
    """Two panels over the optimizer steps: learning rate and batch size."""
    fig, axes = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
    fig.suptitle(title, fontsize=14, fontweight='bold')
    sns.lineplot(data=schedule_df, x='step', y='lr', ax=axes[0], color='steelblue')
    axes[0].set_ylabel('Learning rate')
    sns.lineplot(data=schedule_df, x='step', y='batch_size', ax=axes[1], color='coral', drawstyle='steps-post')
    axes[1].set_ylabel('Batch size')
    axes[1].set_xlabel('Step')
    plt.tight_layout()
    return _save(fig, filename)


def plot_run_metrics(metrics, filename=None):
    """Training loss per step and test accuracy per epoch."""
    steps = metrics.step_frame()
    epochs = metrics.epoch_frame()
    fig, axes = plt.subplots(1, 2, figsize=(14, 5))
    fig.suptitle('Training curves', fontsize=14, fontweight='bold')

    if len(steps) > 0:
        sns.lineplot(data=steps, x='step', y='loss', ax=axes[0], color='steelblue', linewidth=0.8)
    axes[0].set_xlabel('Step')
    axes[0].set_ylabel('Loss')
    axes[0].set_title('Training loss')

    if len(epochs) > 0:
        accuracy = epochs.assign(test_accuracy=epochs['test_accuracy'] * 100)
        sns.lineplot(data=accuracy, x='epoch', y='test_accuracy', ax=axes[1], marker='o', color='seagreen')
        final = accuracy['test_accuracy'].iloc[-1]
        axes[1].axhline(final, color='darkgreen', linestyle='--', label=f'Final: {final:.1f}%')
        axes[1].legend()
    axes[1].set_xlabel('Epoch')
    axes[1].set_ylabel('Top-1 accuracy (%)')
    axes[1].set_title('Test accuracy')
    plt.tight_layout()
    return _save(fig, filename)


def plot_pipeline(schedules, filename=None, worker=0):
    """
    Gantt chart of one worker's events, one row per resource, for each
    ``{label: PipelineSchedule}`` entry.
    """
    fig, axes = plt.subplots(len(schedules), 1, figsize=(12, 2.2 * len(schedules)), squeeze=False)
    for ax, (label, schedule) in zip(axes[:, 0], schedules.items()):
        events = schedule.to_frame()
        events = events[events['worker'] == worker]
        for r in events.itertuples():
            lane = 1 if r.stage in ('gather', 'reduce') else 0
            ax.broken_barh([(r.start_tick, r.end_tick - r.start_tick)], (lane - 0.4, 0.8),
                           facecolors=STAGE_COLORS[r.stage], edgecolor='black', linewidth=0.5)
            if r.end_tick > r.start_tick:
                ax.text((r.start_tick + r.end_tick) / 2, lane, str(r.micro_batch),
                        ha='center', va='center', fontsize=7, color='white')
        ax.set_yticks([0, 1])
        ax.set_yticklabels(['compute', 'comm'])
        ax.set_xlim(0, max(schedule.total_ticks, 1))
        ax.set_title(f'{label}: {schedule.total_ticks} ticks')
    axes[-1, 0].set_xlabel('Tick')
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in STAGE_COLORS.values()]
    fig.legend(handles, list(STAGE_COLORS), loc='upper right', fontsize=8, ncol=len(STAGE_COLORS))
    plt.tight_layout()
    return _save(fig, filename)
