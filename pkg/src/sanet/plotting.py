"""Report figures rendered with the Agg backend next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import CLASS_NAMES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def figure_path(csv_path):
    """``foo/metrics.csv`` -> ``foo/metrics.png``."""
    return Path(csv_path).with_suffix(".png")


def _save(fig, path):
    # no Software/date metadata so reruns produce identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_loss_curves(series, path):
    """``series`` maps (gamma, theta) to (p_t, loss, dloss) arrays."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_g) = plt.subplots(1, 2, figsize=(8, 3.2))
        for (gamma, theta), (pt, loss, grad) in series.items():
            style = "-" if theta == 0 else "--"
            label = f"gamma={gamma:g}, theta={theta:g}"
            ax_l.plot(pt, loss, style, lw=1.2, label=label)
            ax_g.plot(pt, grad, style, lw=1.2, label=label)
        ax_l.set_ylim(0, 5)
        ax_g.set_ylim(-10, 0.5)
        ax_l.set_xlabel("p_t")
        ax_g.set_xlabel("p_t")
        ax_l.set_ylabel("loss")
        ax_g.set_ylabel("d loss / d p_t")
        ax_l.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def plot_training(rows, path, val_rows=None):
    """Per-iteration losses with epoch means; optional validation JA panel."""
    with plt.rc_context(STYLE):
        panels = 2 if val_rows else 1
        fig, axes = plt.subplots(1, panels, figsize=(4.2 * panels, 3.2), squeeze=False)
        ax = axes[0, 0]
        it = np.array([r["iter"] for r in rows])
        for key, color in (("loss", "k"), ("gbcel", "tab:blue"), ("gbjal", "tab:orange")):
            ax.plot(it, [r[key] for r in rows], color=color, lw=0.8, alpha=0.8, label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        if val_rows:
            ax = axes[0, 1]
            ep = [r["epoch"] for r in val_rows]
            for key in ("micro_jaccard", "macro_jaccard", "challenge_jaccard"):
                ax.plot(ep, [r[key] for r in val_rows], marker="o", ms=3, lw=1, label=key)
            ax.set_xlabel("epoch")
            ax.set_ylabel("validation Jaccard")
            ax.set_ylim(0, 1)
            ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(report, path):
    """Grouped per-class Jaccard / Dice bars with the averages as reference lines."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        names = [n.replace("_", " ") for n in CLASS_NAMES]
        x = np.arange(len(names))
        ax.bar(x - 0.2, np.asarray(report.jaccard) * 100, 0.4, label="Jaccard")
        ax.bar(x + 0.2, np.asarray(report.dice) * 100, 0.4, label="Dice")
        ax.axhline(report.macro_jaccard * 100, color="k", ls="--", lw=0.8, label="macro JA")
        ax.axhline(report.micro_jaccard * 100, color="gray", ls=":", lw=0.8, label="micro JA")
        ax.set_xticks(x)
        ax.set_xticklabels(names, fontsize=7, rotation=15)
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
