"""Matplotlib rendering of report data to files.

Every figure is redundant with the delimited/JSON artifacts it sits next
to; nothing downstream consumes the images.  PNGs are written without a
software tag so repeated runs are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 140, "metadata": {"Software": None}, "bbox_inches": "tight"}


def save_error_curves(curves: dict, path) -> None:
    """Cumulative mean error vs batch index, one line per labeled run."""
    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    for label, series in curves.items():
        if not series:
            continue
        xs, ys = zip(*series)
        ax.plot(xs, [100.0 * y for y in ys], label=label, linewidth=1.4)
    ax.set_xlabel("batch index")
    ax.set_ylabel("cumulative top-1 error (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_suite_summary(rows: list[dict], path) -> None:
    """Grouped bars of mean top-1 error per method and corruption."""
    corruptions = sorted({(r["corruption"], r["severity"]) for r in rows})
    methods = sorted({r["method"] for r in rows})
    means = np.full((len(methods), len(corruptions)), np.nan)
    for i, m in enumerate(methods):
        for j, (kind, sev) in enumerate(corruptions):
            vals = [r["top1_error"] for r in rows
                    if r["method"] == m and r["corruption"] == kind
                    and r["severity"] == sev and r["top1_error"] is not None]
            if vals:
                means[i, j] = float(np.mean(vals))
    fig, ax = plt.subplots(figsize=(1.8 + 1.3 * len(corruptions), 3.4))
    width = 0.8 / max(len(methods), 1)
    xs = np.arange(len(corruptions))
    for i, m in enumerate(methods):
        ax.bar(xs + i * width, means[i], width=width, label=m)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([f"{k}:{s}" for k, s in corruptions], fontsize=8)
    ax.set_ylabel("mean top-1 error (%)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_feature_histograms(hist_sets: dict, ranges, path, max_channels: int = 8) -> None:
    """Overlaid per-channel densities for a few channels, one panel each.

    hist_sets maps a label (clean/corrupted/adapted) to a (C, bins) count
    array; all sets share the recorded bin ranges.
    """
    lo, hi = ranges
    any_counts = next(iter(hist_sets.values()))
    n_ch = min(max_channels, any_counts.shape[0])
    cols = min(4, n_ch)
    rows = (n_ch + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.2 * rows), squeeze=False)
    for c in range(n_ch):
        ax = axes[c // cols][c % cols]
        centers = np.linspace(lo[c], hi[c], any_counts.shape[1])
        for label, counts in hist_sets.items():
            total = max(int(counts[c].sum()), 1)
            ax.plot(centers, counts[c] / total, label=label, linewidth=1.0)
        ax.set_title(f"channel {c}", fontsize=8)
        ax.tick_params(labelsize=7)
    for k in range(n_ch, rows * cols):
        axes[k // cols][k % cols].axis("off")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
