"""Report figures rendered straight to image files.

Uses the Agg backend so rendering works on headless machines; nothing
here opens a window. Each function writes one file and returns the
path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ingest import STAGE_NAMES  # noqa: E402
from .metrics import row_normalized  # noqa: E402

_DPI = 150


def _finish(fig, path):
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def save_hypnogram_figure(truth, preds, path, title: str = "Hypnogram"):
    """Manual scoring over model prediction, stage axis W at the top."""
    truth = np.asarray(truth)
    preds = np.asarray(preds)
    x = np.arange(truth.size)
    fig, axes = plt.subplots(2, 1, figsize=(10, 4), sharex=True)
    for ax, track, label in ((axes[0], truth, "manual"), (axes[1], preds, "predicted")):
        ax.step(x, track, where="post", linewidth=0.9)
        ax.set_yticks(range(len(STAGE_NAMES)), STAGE_NAMES)
        ax.set_ylim(len(STAGE_NAMES) - 0.5, -0.5)  # W on top
        ax.set_ylabel(label)
    axes[1].set_xlabel("epoch (30 s)")
    axes[0].set_title(title)
    return _finish(fig, path)


def save_confusion_figure(cm, path, title: str = "Confusion matrix"):
    """Row-normalized percentage heatmap; each row sums to 100."""
    pct = row_normalized(np.asarray(cm))
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    image = ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(len(STAGE_NAMES)), STAGE_NAMES)
    ax.set_yticks(range(len(STAGE_NAMES)), STAGE_NAMES)
    ax.set_xlabel("predicted stage")
    ax.set_ylabel("true stage")
    ax.set_title(title)
    for i in range(pct.shape[0]):
        for j in range(pct.shape[1]):
            color = "white" if pct[i, j] > 50 else "black"
            ax.text(j, i, f"{pct[i, j]:.1f}", ha="center", va="center",
                    color=color, fontsize=8)
    fig.colorbar(image, ax=ax, label="% of row")
    return _finish(fig, path)


def save_stage_metric_figure(per_class: dict, path,
                             title: str = "Per-stage metrics"):
    """Grouped precision/recall/F1 bars from a report's per_class block."""
    names = list(STAGE_NAMES)
    metrics = ("precision", "recall", "f1")
    x = np.arange(len(names))
    width = 0.27
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for i, metric in enumerate(metrics):
        values = [100.0 * per_class[name][metric] for name in names]
        ax.bar(x + (i - 1) * width, values, width, label=metric)
    ax.set_xticks(x, names)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def save_age_accuracy_figure(age_strata: dict, path,
                             title: str = "Accuracy by age group"):
    """One bar per age bucket present in the strata block."""

    def bucket_key(name: str) -> int:
        return int(name.split("-")[0])

    buckets = sorted(age_strata, key=bucket_key)
    values = [100.0 * age_strata[b]["accuracy"] for b in buckets]
    counts = [age_strata[b]["total"] for b in buckets]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(buckets)), 3.6))
    ax.bar(range(len(buckets)), values)
    ax.set_xticks(range(len(buckets)), buckets, rotation=45, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_xlabel("age (years)")
    ax.set_title(title)
    for i, (v, n) in enumerate(zip(values, counts)):
        ax.text(i, v + 1, str(n), ha="center", fontsize=7)
    return _finish(fig, path)


def save_duration_figure(durations_hours, path,
                         title: str = "Sleep study duration"):
    durations = np.asarray(list(durations_hours), dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.hist(durations, bins=min(30, max(5, durations.size // 2)))
    ax.set_xlabel("duration (hours)")
    ax.set_ylabel("studies")
    mean = durations.mean()
    std = durations.std()
    ax.set_title(f"{title} (mean {mean:.2f} h, std {std:.2f} h)")
    return _finish(fig, path)
