"""SVG figures for loss traces and IoU curves (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "supmixlab"  # stable element ids
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("loss_sup", "loss_unsup", "loss_gen", "loss_disc")


def _finish(fig, ax, path):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def smooth(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if window <= 1 or v.size < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def plot_loss_curves(series: dict[str, list[dict]], path, key="loss_sup", window=20):
    """One line per run label; each series is a list of per-step trace records."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, trace in series.items():
        y = smooth([r[key] for r in trace], window)
        ax.plot(np.arange(y.size) + (window - 1 if y.size < len(trace) else 0), y, lw=1.2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    return _finish(fig, ax, path)


def plot_iou_curves(series: dict[str, list[tuple[int, float]]], path, ylabel="rare-class IoU"):
    """series maps a label to (epoch, value) pairs."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, pts in series.items():
        if not pts:
            continue
        x, y = zip(*pts)
        ax.plot(x, y, marker="o", ms=3, lw=1.2, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    return _finish(fig, ax, path)


def plot_bars(means: dict[str, float], stds: dict[str, float], path, ylabel="IoU"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = list(means)
    x = np.arange(len(labels))
    ax.bar(x, [means[k] for k in labels], yerr=[stds.get(k, 0.0) for k in labels], capsize=3, label=ylabel)
    ax.set_xticks(x, labels)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    return _finish(fig, ax, path)
