"""Report figures rendered to PNG files next to the delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ErrorTaxonomy, MethodRow


def plot_error_rates(rows: list[MethodRow], out_path) -> None:
    """Grouped bars: train/test point and path error per method."""
    methods = [r.method for r in rows]
    series = {
        "train point": [r.train_point for r in rows],
        "test point": [r.test_point for r in rows],
        "train path": [r.train_path for r in rows],
        "test path": [r.test_path for r in rows],
    }
    x = np.arange(len(methods))
    width = 0.2
    fig, ax = plt.subplots(figsize=(1.8 * len(methods) + 2, 4))
    for k, (label, values) in enumerate(series.items()):
        ax.bar(x + (k - 1.5) * width, values, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("error rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title("Map-matching error rates by method")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_taxonomy(taxonomy: ErrorTaxonomy, out_path) -> None:
    """Bar chart of error-cause fractions."""
    fractions = taxonomy.fractions
    names = list(fractions)
    values = [fractions[n] for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(names)), values)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=25, ha="right")
    ax.set_ylabel("fraction of errors")
    ax.set_title(f"Error causes over {taxonomy.total} error instances")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_single_rates(point_error: float, path_error: float, out_path) -> None:
    """Two-bar summary of one evaluation."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar([0, 1], [point_error, path_error], width=0.6)
    ax.set_xticks([0, 1])
    ax.set_xticklabels(["point", "path"])
    ax.set_ylabel("error rate")
    ax.set_ylim(0, 1)
    ax.set_title("Evaluation error rates")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_training_curve(history: list[float], out_path) -> None:
    """Penalized objective value per accepted optimizer step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(history)), history, marker="o", markersize=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective (lower is better)")
    ax.set_title("Training objective")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
