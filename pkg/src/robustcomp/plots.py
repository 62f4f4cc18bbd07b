"""Matplotlib renderings written next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_sweep(rows, axis: str, path: str) -> None:
    """Compression-level sweep curve with error bars."""
    ok = [r for r in rows if r["error"] == "" and r["test_mean"] != ""]
    if not ok:
        return
    levels = [r["level"] for r in ok]
    x = np.arange(len(levels))
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, color in (("test", "tab:blue"), ("robust", "tab:red")):
        mean = [100 * float(r[f"{metric}_mean"]) for r in ok]
        std = [100 * float(r[f"{metric}_std"]) for r in ok]
        ax.errorbar(x, mean, yerr=std, marker="o", capsize=3,
                    color=color, label=f"{metric} accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels([str(l) for l in levels])
    ax.set_xlabel("sparsity ratio" if axis == "ratio" else "bit width")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_table(models, cols, cells, path: str) -> None:
    """Grouped bar chart of the comparison grid (mean accuracies)."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    width = 0.8 / max(len(cols), 1)
    x = np.arange(len(models))
    for ax, metric in zip(axes, ("test", "robustness")):
        for i, c in enumerate(cols):
            vals = []
            for m in models:
                r = cells.get((m, c))
                if r is None:
                    vals.append(0.0)
                else:
                    vals.append(100 * (r.clean_mean if metric == "test" else r.robust_mean))
            ax.bar(x + (i - (len(cols) - 1) / 2) * width, vals, width, label=c)
        ax.set_xticks(x)
        ax.set_xticklabels(models)
        ax.set_title(f"{metric} accuracy")
        ax.set_ylim(0, 100)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylabel("accuracy [%]")
    axes[1].legend(title="fine-tuning")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
