"""Report figures (PNG, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import GROUPS, MetricReport  # noqa: E402


def plot_diversity_curve(report: MetricReport, path, group: str = "overall"):
    """DIV@K against K, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    curve = report.diversity_curve(group)
    for m in report.methods:
        pts = sorted((k, v) for mm, k, v in curve if mm == m)
        if pts:
            ks, vs = zip(*pts)
            ax.plot(ks, vs, marker="o", label=m)
    ax.set_xlabel("K")
    ax.set_ylabel("DIV@K (distinct concepts)")
    ax.set_title(f"Diversity ({group})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(report: MetricReport, path, metric: str = "ndcg", k: int = 5):
    """Grouped bars: methods on the x axis, one bar per student group."""
    methods = report.methods
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(methods)), 3.5))
    width = 0.8 / len(GROUPS)
    x = np.arange(len(methods))
    for i, g in enumerate(GROUPS):
        vals = []
        for m in methods:
            try:
                vals.append(report.get(m, g, metric, k))
            except KeyError:
                vals.append(np.nan)
        ax.bar(x + (i - 1) * width, vals, width, label=g)
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"{metric}@{k}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curve(epochs, series: dict, path, ylabel: str = "loss"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(epochs, ys, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
