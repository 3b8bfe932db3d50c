"""Figures written next to the CLI's tab-separated output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training(metrics, path, title=None):
    """Loss (log scale) and accuracy against epoch, side by side."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_l.plot(epochs, [m.loss for m in metrics], marker="o", ms=3)
    ax_l.set_yscale("log")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("train loss")
    ax_a.plot(epochs, [m.acc for m in metrics], marker="o", ms=3, color="tab:green")
    ax_a.set_ylim(0, 1.02)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("train accuracy")
    for ax in (ax_l, ax_a):
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_params(parts, path, title=None):
    """Horizontal bar chart of parameter counts per network part."""
    names = [k for k in parts if k != "total"]
    vals = [parts[k] for k in names]
    fig, ax = plt.subplots(figsize=(5, 0.4 * len(names) + 1.2))
    ax.barh(names[::-1], vals[::-1], color="tab:blue")
    for y, v in enumerate(vals[::-1]):
        ax.text(v, y, f" {v:,}", va="center", fontsize=8)
    ax.set_xlabel("parameters")
    ax.set_xlim(0, max(vals) * 1.25 if vals else 1)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
