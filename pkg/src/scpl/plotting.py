"""Figure rendering for simulator traces and training metrics.

Everything here draws onto the non-interactive Agg canvas and writes PNG
files; nothing opens a window.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .schedule import PHASES, GanttTrace  # noqa: E402

PHASE_COLORS = {"FW": "#4c72b0", "LOSS": "#dd8452", "BW": "#55a868", "UP": "#c44e52"}


def plot_gantt(trace: GanttTrace, path, title: str | None = None) -> Path:
    devices = sorted(trace.devices)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.15 * trace.makespan + 3), 0.6 * len(devices) + 1.8))
    for row, d in enumerate(devices):
        for iv in trace.devices[d]:
            if iv.end == iv.start:
                continue
            ax.barh(row, iv.end - iv.start, left=iv.start, height=0.7,
                    color=PHASE_COLORS[iv.kind], edgecolor="black", linewidth=0.5)
            label = f"{iv.kind[0]}{iv.layer}" + (f".{iv.micro_batch}" if iv.micro_batch > 1 else "")
            ax.text((iv.start + iv.end) / 2, row, label, ha="center", va="center", fontsize=6)
    ax.set_yticks(range(len(devices)), [f"dev {d}" for d in devices])
    ax.invert_yaxis()
    ax.set_xlim(0, max(trace.makespan, 1))
    ax.set_xlabel("time units")
    ax.set_title(title or f"{trace.strategy}: makespan {trace.makespan}")
    ax.legend(handles=[Patch(color=PHASE_COLORS[p], label=p) for p in PHASES],
              loc="upper center", bbox_to_anchor=(0.5, -0.22), fontsize=7, ncol=4, frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(records: Sequence[dict], path, title: str = "") -> Path:
    """Two panels: per-component loss and train/test accuracy against epoch."""
    epochs = [r["epoch"] for r in records]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 3.8))
    if records:
        k = len(records[0]["component_losses"])
        for j in range(k):
            ax_l.plot(epochs, [r["component_losses"][j] for r in records], label=f"component {j + 1}")
        ax_a.plot(epochs, [r["train_acc"] for r in records], label="train")
        ax_a.plot(epochs, [r["test_acc"] for r in records], label="test")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("mean batch loss")
    ax_l.legend(fontsize=7)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1.02)
    ax_a.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(rows: Sequence[dict], path) -> Path:
    labels = [r["label"] for r in rows]
    secs = [r["seconds"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(labels, secs, color="#4c72b0")
    ax.set_ylabel("epoch wall-clock (s)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
