"""Matplotlib renderers for run reports.

Every CLI report path writes a PNG figure next to its delimited output:
training curves beside the log CSV, branch-weight bars beside the weight
CSVs, and a grayscale montage beside the ranked feature-map PGMs.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(rows, path):
    """Loss and error curves from training log rows."""
    iters = [r.iteration for r in rows]
    fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax_loss.plot(iters, [r.loss for r in rows], marker=".", color="tab:blue")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("train loss")
    ax_loss.grid(alpha=0.3)
    ax_err.plot(iters, [r.top1 for r in rows], marker=".", color="tab:red",
                label="top-1 error")
    if rows and rows[0].top5 is not None:
        ax_err.plot(iters, [r.top5 for r in rows], marker=".",
                    color="tab:orange", label="top-5 error")
    ax_err.set_xlabel("iteration")
    ax_err.set_ylabel("error")
    ax_err.set_ylim(0.0, 1.0)
    ax_err.legend(loc="upper right", fontsize=8)
    ax_err.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_lc_weight_bars(means, path):
    """Bar chart of the per-branch mean fusion weights."""
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    branches = list(range(1, len(means) + 1))
    ax.bar(branches, list(means), color="tab:blue")
    ax.set_xticks(branches)
    ax.set_xlabel("branch (last = main)")
    ax.set_ylabel("mean weight")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_feature_map_montage(ranked, path, cols=4):
    """Grid of the top-ranked activation maps as grayscale panels."""
    count = len(ranked.images)
    cols = min(cols, count)
    rows = math.ceil(count / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows),
                             squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < count:
            ax.imshow(ranked.images[i], cmap="gray", vmin=0, vmax=255)
            ax.set_title(f"rank {i} (ch {int(ranked.order[i])})", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
