"""Report figures: loss curves, ablation bars and CMC curves.

All figures use the Agg backend and are saved as PNG with the software
metadata stripped, so reruns give byte-identical files.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(
    epoch_losses: Sequence[float], epoch_train_accuracy: Sequence[float], path, title: str | None = None
) -> Path:
    """Loss (left axis) and training accuracy (right axis) per epoch."""
    if not epoch_losses:
        raise ValueError("no epochs to plot")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = range(1, len(epoch_losses) + 1)
        ax.plot(epochs, epoch_losses, color="C0", marker="o", ms=3, label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss", color="C0")
        if epoch_train_accuracy:
            ax2 = ax.twinx()
            ax2.plot(epochs, epoch_train_accuracy, color="C1", marker="s", ms=3, label="train accuracy")
            ax2.set_ylim(0.0, 1.02)
            ax2.set_ylabel("training accuracy", color="C1")
            ax2.grid(False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_ablation(
    labels: Sequence[str],
    means: Sequence[float],
    sds: Sequence[float] | None,
    path,
    metric: str,
    axis_name: str,
) -> Path:
    """Bar chart of one metric across ablation values, with sd error bars when given."""
    if len(labels) != len(means):
        raise ValueError("labels and means differ in length")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(labels))
        ax.bar(xs, means, yerr=sds if sds is not None else None, capsize=3, color="C0", alpha=0.8)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(v) for v in labels])
        ax.set_xlabel(axis_name)
        ax.set_ylabel(metric)
        return _save(fig, path)


def plot_cmc(cmc: Sequence[float], path, max_rank: int = 20) -> Path:
    if not cmc:
        raise ValueError("empty CMC curve")
    ranks = list(range(1, min(len(cmc), max_rank) + 1))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ranks, cmc[: len(ranks)], marker="o", ms=3)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        return _save(fig, path)
