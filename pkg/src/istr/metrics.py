"""Region and text metrics.

Polygons are ``(N, 2)`` arrays of ``(x, y)`` in pixel-corner coordinates:
pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` and its center
sits at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


def as_polygon(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {len(pts)}")
    return pts


def polygon_area(points) -> float:
    """Shoelace area (absolute)."""
    pts = as_polygon(points)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize(polygon, canvas: tuple[int, int], *, with_flag: bool = False):
    """Binary mask of the pixels whose centers fall inside ``polygon``.

    Even-odd rule, evaluated only over the polygon's bounding box. With
    ``with_flag=True`` returns ``(mask, degenerate)`` where ``degenerate`` is
    set when nothing survives clipping to the canvas.
    """
    h, w = int(canvas[0]), int(canvas[1])
    pts = as_polygon(polygon)
    mask = np.zeros((h, w), dtype=bool)

    c0 = max(int(np.ceil(pts[:, 0].min() - 0.5)), 0)
    c1 = min(int(np.floor(pts[:, 0].max() - 0.5)), w - 1)
    r0 = max(int(np.ceil(pts[:, 1].min() - 0.5)), 0)
    r1 = min(int(np.floor(pts[:, 1].max() - 0.5)), h - 1)
    if c1 >= c0 and r1 >= r0:
        xs = np.arange(c0, c1 + 1) + 0.5
        ys = np.arange(r0, r1 + 1) + 0.5
        inside = np.zeros((len(ys), len(xs)), dtype=bool)
        nxt = np.roll(pts, -1, axis=0)
        for (xi, yi), (xj, yj) in zip(pts, nxt):
            if yi == yj:
                continue
            straddles = (yi > ys) != (yj > ys)
            if not straddles.any():
                continue
            x_cross = xi + (ys - yi) * (xj - xi) / (yj - yi)
            inside ^= straddles[:, None] & (xs[None, :] < x_cross[:, None])
        mask[r0:r1 + 1, c0:c1 + 1] = inside

    degenerate = not mask.any()
    if degenerate:
        log.debug("degenerate polygon on %dx%d canvas: %s", h, w, pts.tolist())
    return (mask, degenerate) if with_flag else mask


def union_mask(polygons: Sequence, canvas: tuple[int, int]) -> np.ndarray:
    out = np.zeros((int(canvas[0]), int(canvas[1])), dtype=bool)
    for poly in polygons:
        out |= rasterize(poly, canvas)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class RegionSetPair:
    """Ground-truth and predicted polygons for one image."""

    gt: list = field(default_factory=list)
    pred: list = field(default_factory=list)
    canvas: tuple[int, int] = (512, 512)


def union_iou(pair: RegionSetPair) -> float:
    """IoU between the union of all GT regions and the union of all predictions.

    Treating each side as one merged region means a detector that reports two
    neighbouring words as a single box is scored on the pixels it covers, not
    penalised for the box count.
    """
    return mask_iou(union_mask(pair.gt, pair.canvas), union_mask(pair.pred, pair.canvas))


def mean_iou(pairs: Sequence[RegionSetPair]) -> float:
    if len(pairs) == 0:
        raise ValueError("mean_iou of an empty list")
    return float(np.mean([union_iou(p) for p in pairs]))


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(gt: str, pred: str) -> float:
    denom = max(len(gt), len(pred))
    if denom == 0:
        return 0.0
    return edit_distance(gt, pred) / denom


def char_accuracy(gt: str, pred: str) -> float:
    """``(1 - NED) * 100`` with NED normalised by the longer string.

    Two empty strings count as identical (100.0); that case is logged since
    it usually means an upstream filter let an empty label through.
    """
    if not gt and not pred:
        log.warning("char_accuracy called with two empty strings; returning 100.0")
        return 100.0
    return (1.0 - normalized_edit_distance(gt, pred)) * 100.0


def mean_char_accuracy(pairs: Sequence[tuple[str, str]]) -> float:
    """Per-instance Char-Accuracy averaged over ``pairs``."""
    if len(pairs) == 0:
        raise ValueError("mean_char_accuracy of an empty list")
    return float(np.mean([char_accuracy(g, p) for g, p in pairs]))


def text_accuracy(pairs: Sequence[tuple[str, str]]) -> float:
    """Percentage of exact, case-sensitive matches."""
    if len(pairs) == 0:
        raise ValueError("text_accuracy of an empty list")
    hits = sum(1 for g, p in pairs if g == p)
    return 100.0 * hits / len(pairs)


def binary_accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    if labels.size == 0:
        raise ValueError("binary_accuracy of empty vectors")
    return 100.0 * float(np.mean(labels == predictions))


def confusion_counts(labels, predictions) -> dict[str, int]:
    """tp/fp/tn/fn with 1 as the positive class."""
    labels = np.asarray(labels).astype(bool)
    predictions = np.asarray(predictions).astype(bool)
    return {
        "tp": int(np.sum(labels & predictions)),
        "fp": int(np.sum(~labels & predictions)),
        "tn": int(np.sum(~labels & ~predictions)),
        "fn": int(np.sum(labels & ~predictions)),
    }
