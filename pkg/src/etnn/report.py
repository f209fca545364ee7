"""Report rendering: delimited output plus matplotlib figures.

Every writer lands atomically (temp file in the target directory, then
``os.replace``) so a crashed run never leaves a partial artifact.
"""

from __future__ import annotations

import csv
import os
import tempfile
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "atomic_write_text",
    "write_csv",
    "format_table",
    "render_expressivity_figure",
    "render_scaling_figure",
    "render_history_figure",
]


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Plain text table with aligned columns for terminal output."""
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _atomic_savefig(fig, path) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def render_expressivity_figure(reports, path) -> None:
    """One accuracy heatmap (layers x widths) per chain-lift variant."""
    reports = list(reports)
    fig, axes = plt.subplots(
        1, len(reports), figsize=(3.2 * len(reports), 3.0), squeeze=False
    )
    for ax, report in zip(axes[0], reports):
        grid = np.array(
            [
                [report.mean_accuracy(layers, width) for width in report.widths]
                for layers in report.layer_counts
            ]
        )
        im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="RdYlGn", aspect="auto")
        ax.set_xticks(range(len(report.widths)), [str(w) for w in report.widths])
        ax.set_yticks(
            range(len(report.layer_counts)), [str(l) for l in report.layer_counts]
        )
        ax.set_xlabel("hidden width")
        ax.set_ylabel("layers")
        ax.set_title(f"{report.variant} (k={report.k})")
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                ax.text(
                    j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=9
                )
    fig.colorbar(im, ax=axes[0].tolist(), label="mean accuracy", shrink=0.85)
    _atomic_savefig(fig, path)


def render_scaling_figure(reports, path) -> None:
    """Log-log forward time vs cell count with the fitted slope per regime."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for report in reports:
        cells = [row[0] for row in report.rows]
        times = [row[2] for row in report.rows]
        slope = "n/a" if report.slope is None else f"{report.slope:.2f}"
        ax.loglog(cells, times, "o-", label=f"{report.regime} (slope {slope})")
    ax.set_xlabel("cells")
    ax.set_ylabel("forward seconds")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _atomic_savefig(fig, path)


def render_history_figure(history, path) -> None:
    """Training curve: loss on the left axis, validation metric on the right."""
    epochs = [row["epoch"] for row in history.rows]
    losses = [row["train_loss"] for row in history.rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(epochs, losses, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    vals = [row["val_metric"] for row in history.rows]
    if any(np.isfinite(v) for v in vals):
        twin = ax.twinx()
        twin.plot(epochs, vals, color="tab:orange", label="val metric")
        twin.set_ylabel("val metric")
    ax.grid(alpha=0.3)
    _atomic_savefig(fig, path)
