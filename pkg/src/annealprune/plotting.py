"""Figures rendered next to the metrics CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.7),
    "figure.dpi": 120,
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy(curves: dict, path, title: str | None = None):
    """Test accuracy per epoch; ``curves`` maps label -> rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in curves.items():
            ax.plot([r.epoch for r in rows], [r.test_acc for r in rows], marker="o", ms=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_nonzero(curves: dict, path, schedule=None):
    """Target-layer nonzero fraction per epoch, optionally over the analytic schedule."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in curves.items():
            ax.plot([r.epoch for r in rows], [r.nonzero_frac for r in rows], marker="o", ms=3, label=label)
        if schedule:
            ax.step([r[0] for r in schedule], [r[3] for r in schedule], where="post",
                    color="0.5", ls="--", lw=1, label="schedule")
        ax.set_xlabel("epoch")
        ax.set_ylabel("nonzero fraction")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_schedule(rows, path):
    """Scheduled nonzero fraction per pruning epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([r[0] for r in rows], [r[3] for r in rows], marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("scheduled nonzero fraction")
        ax.set_ylim(0, 1.05)
        return _save(fig, path)
