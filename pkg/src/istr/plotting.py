"""Figures written next to the text reports (PNG via the Agg canvas)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Polygon as PolygonPatch

from istr.corpus import write_image
from istr.training import TrainLog

GT_COLOR = "red"
PRED_COLOR = "lime"


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100)
    return path


def learning_curves(log: TrainLog, path, title: str = "") -> Path:
    """Loss and score per epoch, train vs validation."""
    epochs = log.column("epoch")
    fig = Figure(figsize=(9, 3.5))
    ax_loss, ax_score = fig.subplots(1, 2)
    for ax, key, label in ((ax_loss, "loss", "loss"), (ax_score, "score", log.metric)):
        ax.plot(epochs, log.column(f"train_{key}"), marker=".", label="train")
        ax.plot(epochs, log.column(f"val_{key}"), marker=".", label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def heatmap_overlay(image: np.ndarray, heatmap: np.ndarray, path, polygons: Sequence = (),
                    alpha: float = 0.5) -> Path:
    """Attribution map over the image; optional outlines of the removed regions.

    A grayscale copy of the raw map is written beside the overlay as
    ``<stem>_map.png``.
    """
    path = Path(path)
    write_image(path.with_name(path.stem + "_map.png"), np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8))
    fig = Figure(figsize=(4, 4))
    ax = fig.add_axes((0, 0, 1, 1))
    ax.imshow(image)
    ax.imshow(heatmap, cmap="jet", alpha=alpha, vmin=0, vmax=1)
    for poly in polygons:
        ax.add_patch(PolygonPatch(np.asarray(poly), fill=False, edgecolor="white", linewidth=1))
    ax.set_axis_off()
    return _save(fig, path)


def region_overlay(image: np.ndarray, gt: Sequence, pred: Sequence, path, title: str = "") -> Path:
    """Ground-truth outlines in red, predictions in green."""
    fig = Figure(figsize=(4, 4.3 if title else 4))
    ax = fig.add_axes((0, 0, 1, 0.93 if title else 1))
    ax.imshow(image)
    for polys, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        for poly in polys:
            ax.add_patch(PolygonPatch(np.asarray(poly), fill=False, edgecolor=color, linewidth=1.5))
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
