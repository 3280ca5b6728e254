"""Figures written next to the line-delimited reports.

Everything renders through the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dfacon.data import AttackType  # noqa: E402

FIG_WIDTH = 6.0
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def new_figure(width: float = FIG_WIDTH, height: float | None = None, **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN), **kw)
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_score_distributions(scores, labels, threshold: float, path, title: str = "") -> Path:
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    fig, ax = new_figure()
    bins = np.linspace(min(scores.min(), threshold) - 1e-3, max(scores.max(), threshold) + 1e-3, 40)
    ax.hist(scores[labels], bins=bins, alpha=0.6, label="similar", color="tab:red")
    ax.hist(scores[~labels], bins=bins, alpha=0.6, label="dissimilar", color="tab:blue")
    ax.axvline(threshold, color="k", ls="--", lw=1, label=f"threshold {threshold:.3f}")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pairs")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_per_attack(reports: dict, path, title: str = "F1 by attack type") -> Path:
    """Grouped bars, one group per attack, one bar per named report."""
    attacks = [a for a in AttackType.forgeries() if any(a in r.per_attack for r in reports.values())]
    fig, ax = new_figure()
    width = 0.8 / max(1, len(reports))
    x = np.arange(len(attacks))
    for k, (name, rep) in enumerate(reports.items()):
        vals = [rep.per_attack[a].f1 if a in rep.per_attack else np.nan for a in attacks]
        ax.bar(x + k * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x, [a.value for a in attacks])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(ablation, path) -> Path:
    metrics = ("precision", "recall", "f1")
    fig, ax = new_figure()
    width = 0.35
    x = np.arange(len(metrics))
    for k, (probe, rep) in enumerate(ablation.reports.items()):
        ax.bar(x + (k - 0.5) * width, [getattr(rep, m) for m in metrics], width,
               label=f"{probe.value} ({rep.dim}-d)")
    ax.set_xticks(x, list(metrics))
    ax.set_ylim(0, 1.05)
    ax.set_title("probe-point ablation")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_log(log: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in log]
    fig, ax = new_figure()
    ax.plot(epochs, [r["train_loss"] for r in log], marker="o", ms=3, label="train loss")
    ax.plot(epochs, [r["val_loss"] for r in log], marker="s", ms=3, label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("contrastive loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in log], color="0.5", lw=1, ls=":", label="lr")
    ax2.set_ylabel("learning rate")
    ax2.spines["top"].set_visible(False)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], frameon=False)
    return _save(fig, path)
