"""Report figures for pretraining and ablation runs.

Every function writes a PNG next to the delimited table it was drawn from,
so the numbers behind a figure are always on disk.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_metrics(records: Sequence[dict], path, switch_epoch: int | None = None) -> Path:
    """Loss and mean top-1 queue similarity against step, stage switch marked."""
    steps = np.array([r["step"] for r in records])
    loss = np.array([r["loss"] for r in records])
    top1 = np.array([r["mean_top1_sim"] for r in records])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, loss, color="C0", lw=1.2, label="loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(steps, top1, color="C1", lw=1.0, label="mean top-1 sim")
        ax2.set_ylabel("mean top-1 similarity")
        ax2.grid(False)
        if switch_epoch is not None:
            first = [r["step"] for r in records if r["stage"] == 2]
            if first:
                ax.axvline(first[0], color="0.4", ls="--", lw=0.8)
        lines = ax.get_lines()[:1] + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="upper right")
        return _save(fig, path)


def plot_sweep(param: str, values: Sequence, accuracies: Sequence[float], path,
               precisions: Sequence[float] | None = None, log_x: bool | None = None) -> Path:
    """Accuracy (and optionally mining precision) across one swept parameter."""
    x = np.asarray(values, dtype=float)
    if log_x is None:
        log_x = bool(np.all(x > 0) and x.max() / max(x.min(), 1e-12) >= 50)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, 100 * np.asarray(accuracies), "o-", color="C0", label="linear top-1 (%)")
        best = int(np.argmax(accuracies))
        ax.plot(x[best], 100 * accuracies[best], "*", ms=12, color="C3")
        if precisions is not None:
            ax.plot(x, 100 * np.asarray(precisions), "s--", color="C2", label="mining precision (%)")
        if log_x:
            ax.set_xscale("log", base=2)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{v:g}" for v in values])
        ax.set_xlabel(param)
        ax.set_ylabel("%")
        ax.legend()
        return _save(fig, path)


def plot_precision(epochs: Sequence[int], series: dict[str, Sequence[float]], path) -> Path:
    """Mining precision per checkpoint epoch, one line per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (name, vals) in enumerate(series.items()):
            ax.plot(epochs, vals, "o-", ms=3, color=f"C{i}", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("precision of mined positives")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, path)
