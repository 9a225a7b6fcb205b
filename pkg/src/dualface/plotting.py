"""Figures for training and evaluation reports.

Matplotlib is forced onto the Agg backend; every function writes a file and
returns its path. Trace grids are written pixel-exact with PIL rather than
through a figure so they stay lossless.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from .data import save_image  # noqa: E402
from .losses import CSV_FIELDS  # noqa: E402
from .metrics import COLUMNS, MetricsRow  # noqa: E402

__all__ = ["contour_to_rgb", "trace_grid", "save_trace_grid", "plot_losses", "plot_metrics"]

STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "figure.dpi": 120,
}


def contour_to_rgb(contour: torch.Tensor, size: int) -> torch.Tensor:
    """Render a (C, h, w) contour as a (3, size, size) image for display.

    Three channels pass through, one channel is repeated, and one-hot masks
    become gray levels by class index.
    """
    c = contour.detach().float()
    if c.shape[0] == 1:
        c = c.expand(3, -1, -1)
    elif c.shape[0] != 3:
        levels = c.argmax(dim=0, keepdim=True).float() / (c.shape[0] - 1)
        c = levels.expand(3, -1, -1)
    if c.shape[-1] != size:
        c = F.interpolate(c.unsqueeze(0), size=(size, size), mode="nearest-exact")[0]
    return c.clamp(0, 1)


def trace_grid(contours, identities, outputs: Sequence[torch.Tensor], pad: int = 2) -> torch.Tensor:
    """One row per sample: contour | identity | output of each iteration."""
    size = outputs[0].shape[-1]
    rows = []
    for b in range(len(identities)):
        tiles = [contour_to_rgb(contours[b], size), contour_to_rgb(identities[b], size)]
        tiles += [o[b].detach().float().clamp(0, 1) for o in outputs]
        tiles = [F.pad(t, (pad, pad, pad, pad), value=1.0) for t in tiles]
        rows.append(torch.cat(tiles, dim=2))
    return torch.cat(rows, dim=1)


def save_trace_grid(path, contours, identities, outputs) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(trace_grid(contours, identities, outputs), path)
    return path


def _read_losses(csv_path) -> dict[str, list[float]]:
    cols = {k: [] for k in CSV_FIELDS}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in CSV_FIELDS:
                cols[k].append(float(row[k]))
    return cols


def plot_losses(csv_path, out_path=None) -> Path:
    """Total loss and each unweighted term against step, on a log scale."""
    cols = _read_losses(csv_path)
    out_path = Path(out_path or Path(csv_path).with_suffix(".png"))
    with plt.rc_context(STYLE):
        fig, (ax_total, ax_terms) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax_total.plot(cols["step"], cols["total"], color="k", lw=1.2)
        ax_total.set(title="total", xlabel="step", yscale="log")
        for name in CSV_FIELDS[1:-1]:
            ax_terms.plot(cols["step"], cols[name], lw=1, label=name)
        ax_terms.set(title="terms", xlabel="step", yscale="log")
        ax_terms.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return out_path


def plot_metrics(rows: Sequence[MetricsRow], out_path) -> Path:
    """Grouped bars, one panel per metric, one bar per row tag."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tags = [r.tag for r in rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(COLUMNS), figsize=(3 * len(COLUMNS), 2.8))
        for ax, (key, label) in zip(axes, COLUMNS.items()):
            values = [getattr(r, key) for r in rows]
            ax.bar(range(len(rows)), values, color="0.45", width=0.6)
            ax.set_xticks(range(len(rows)), tags, rotation=45 if len(rows) > 4 else 0)
            ax.set_title(label)
            ax.grid(axis="x", visible=False)
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return out_path
