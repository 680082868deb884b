"""Figures written next to the CSV / JSON-lines reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves(history, path):
    """Risk after each half-step of every epoch, plus held-out accuracy if logged."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if history:
            ep = [h.epoch for h in history]
            ax.plot(ep, [h.risk_post_pi for h in history], label="after leaf update")
            ax.plot(ep, [h.risk_post_sgd for h in history], label="after gradient epoch")
            ax.set_yscale("log")
            acc = [h.eval_accuracy for h in history]
            if any(a is not None for a in acc):
                ax2 = ax.twinx()
                ax2.plot(ep, [np.nan if a is None else 100 * a for a in acc], color="k", ls=":", label="eval accuracy")
                ax2.set_ylabel("accuracy (%)")
                ax2.legend(loc="center right")
            ax.legend(loc="upper right")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training risk")
        _save(fig, path)


def tree_sweep(rows, path):
    """Accuracy against the number of trees."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        counts = [r[0] for r in rows]
        ax.plot(counts, [100 * r[1] for r in rows], "o-")
        ax.set_xlabel("number of trees")
        ax.set_ylabel("accuracy (%)")
        _save(fig, path)


def confusion(matrix, vocabulary, path):
    matrix = np.asarray(matrix)
    with plt.rc_context(RC):
        size = 2.5 + 0.3 * len(vocabulary)
        fig, ax = plt.subplots(figsize=(size, size))
        ax.imshow(matrix, cmap="Blues")
        ticks = np.arange(len(vocabulary))
        ax.set_xticks(ticks, vocabulary, rotation=90)
        ax.set_yticks(ticks, vocabulary)
        for (i, j), v in np.ndenumerate(matrix):
            if v:
                ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        _save(fig, path)
