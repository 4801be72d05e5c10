"""Independent reference implementations used only by the tests."""

from functools import lru_cache

import numpy as np


def winding_number(x, y, pts):
    """Winding number of (x, y) around the closed polygon ``pts`` (pure Python)."""
    wn = 0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
        if y0 <= y < y1 and cross > 0:
            wn += 1
        elif y1 <= y < y0 and cross < 0:
            wn -= 1
    return wn


def count_mask(polygons, canvas):
    """Set of pixel (row, col) whose centers lie inside any polygon."""
    h, w = canvas
    hit = set()
    for poly in polygons:
        pts = [tuple(map(float, p)) for p in np.asarray(poly).reshape(-1, 2)]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        for r in range(max(0, int(min(ys)) - 1), min(h, int(max(ys)) + 2)):
            for c in range(max(0, int(min(xs)) - 1), min(w, int(max(xs)) + 2)):
                if winding_number(c + 0.5, r + 0.5, pts) != 0:
                    hit.add((r, c))
    return hit


def brute_force_union_iou(gt, pred, canvas):
    a, b = count_mask(gt, canvas), count_mask(pred, canvas)
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def recursive_edit_distance(a: str, b: str) -> int:
    """Textbook exponential-branching recursion, memoised on suffixes."""

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(
            d(i + 1, j) + 1,
            d(i, j + 1) + 1,
            d(i + 1, j + 1) + (a[i] != b[j]),
        )

    return d(0, 0)


def all_strings(alphabet: str, max_len: int) -> list[str]:
    out = [""]
    frontier = [""]
    for _ in range(max_len):
        frontier = [s + ch for s in frontier for ch in alphabet]
        out += frontier
    return out


def exhaustive_edit_distances(strings) -> dict:
    """Recursive definition on string suffixes, one shared memo table for every pair."""
    memo: dict = {}

    def d(a, b):
        key = (a, b)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if not a:
            val = len(b)
        elif not b:
            val = len(a)
        else:
            val = min(d(a[1:], b) + 1, d(a, b[1:]) + 1, d(a[1:], b[1:]) + (a[0] != b[0]))
        memo[key] = val
        return val

    return {(a, b): d(a, b) for a in strings for b in strings}
