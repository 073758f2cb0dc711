"""Figures written next to the TSV outputs of the train and eval commands."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
# no version string in PNG metadata, so output bytes are stable
_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_training_curve(history: np.ndarray, path, smooth: int = 20) -> Path:
    """Loss components against step, with a trailing moving average."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.0),
                                        gridspec_kw={"height_ratios": [3, 1]})
        steps = history[:, 0]
        for col, label in ((2, "total"), (3, "term-term"), (4, "term-relation-term")):
            y = history[:, col]
            line, = ax.plot(steps, y, lw=0.6, alpha=0.35)
            if len(y) >= smooth > 1:
                avg = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
                ax.plot(steps[smooth - 1:], avg, color=line.get_color(), lw=1.6, label=label)
            else:
                line.set_label(label)
        ax.set_ylabel("loss")
        ax.legend()
        ax_lr.plot(steps, history[:, 1], color="0.3", lw=1.2)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("step")
        return _save(fig, path)


def plot_accuracy(acc: dict, path, baseline: dict | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ks = sorted(acc)
        x = np.arange(len(ks))
        w = 0.38 if baseline else 0.6
        ax.bar(x - (w / 2 if baseline else 0), [acc[k] for k in ks], w, label="model")
        if baseline:
            ax.bar(x + w / 2, [baseline.get(k, 0.0) for k in ks], w, label="baseline", color="0.65")
            ax.legend()
        ax.set_xticks(x, [f"acc@{k}" for k in ks])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("accuracy")
        return _save(fig, path)


def plot_mcsm(scores: dict, path, bound: float | None = None, random_scores: dict | None = None) -> Path:
    with plt.rc_context(STYLE):
        types = sorted(scores)
        fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(types)), 4.0))
        x = np.arange(len(types))
        ax.bar(x, [scores[t] for t in types], 0.7, label="model")
        if random_scores:
            ax.plot(x, [random_scores[t] for t in types], "k_", ms=12, mew=2, label="random")
        if bound is not None:
            ax.axhline(bound, color="tab:red", lw=1, ls="--", label="upper bound")
        ax.set_xticks(x, types, rotation=90 if len(types) > 8 else 0)
        ax.set_ylabel("MCSM")
        ax.legend()
        return _save(fig, path)
