import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from istr.metrics import (RegionSetPair, binary_accuracy, char_accuracy, confusion_counts, edit_distance,
                          mask_iou, mean_iou, polygon_area, rasterize, text_accuracy, union_iou)

from oracles import brute_force_union_iou, count_mask, recursive_edit_distance


def rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


class TestRasterize:
    def test_axis_aligned_rectangle(self):
        assert rasterize(rect(0, 0, 10, 10), (512, 512)).sum() == 100

    def test_outside_canvas_is_flagged(self):
        mask, degenerate = rasterize(rect(600, 600, 700, 700), (512, 512), with_flag=True)
        assert not mask.any() and degenerate

    def test_triangle_matches_pixel_center_count(self):
        tri = [(0, 0), (10, 0), (0, 10)]
        n = int(rasterize(tri, (512, 512)).sum())
        assert n == len(count_mask([tri], (512, 512)))
        assert abs(n - 50) <= 5

    def test_clipped_to_canvas(self):
        assert rasterize(rect(-5, -5, 5, 5), (20, 20)).sum() == 25

    def test_too_few_vertices(self):
        with pytest.raises(ValueError):
            rasterize([(0, 0), (1, 1)], (4, 4))

    def test_concave_polygon(self):
        u = [(0, 0), (30, 0), (30, 30), (20, 30), (20, 10), (10, 10), (10, 30), (0, 30)]
        mask = rasterize(u, (40, 40))
        assert mask.sum() == len(count_mask([u], (40, 40))) == 30 * 30 - 10 * 20
        assert mask.sum() == polygon_area(u)


class TestUnionIoU:
    def test_identity(self):
        gt = [rect(0, 0, 10, 10), [(30, 30), (50, 32), (40, 45)]]
        assert union_iou(RegionSetPair(gt, gt, (64, 64))) == 1.0

    def test_half_overlap(self):
        pair = RegionSetPair([rect(0, 0, 10, 10)], [rect(5, 0, 15, 10)], (512, 512))
        assert union_iou(pair) == pytest.approx(50 / 150)

    @pytest.mark.parametrize("gap", [0, 4, 10])
    def test_merged_prediction_over_two_boxes(self, gap):
        gt = [rect(0, 0, 10, 10), rect(10 + gap, 0, 20 + gap, 10)]
        pred = [rect(0, 0, 20 + gap, 10)]
        expected = (100 + 100) / ((20 + gap) * 10)
        assert union_iou(RegionSetPair(gt, pred, (64, 64))) == pytest.approx(expected)

    def test_empty_conventions(self):
        assert union_iou(RegionSetPair([], [], (8, 8))) == 1.0
        assert union_iou(RegionSetPair([rect(0, 0, 2, 2)], [], (8, 8))) == 0.0
        assert union_iou(RegionSetPair([], [rect(0, 0, 2, 2)], (8, 8))) == 0.0

    def test_disjoint(self):
        assert union_iou(RegionSetPair([rect(0, 0, 4, 4)], [rect(10, 10, 14, 14)], (32, 32))) == 0.0

    def test_mean_iou(self):
        hit = RegionSetPair([rect(0, 0, 4, 4)], [rect(0, 0, 4, 4)], (8, 8))
        miss = RegionSetPair([rect(0, 0, 4, 4)], [], (8, 8))
        assert mean_iou([hit, miss]) == 0.5
        assert mean_iou([hit, hit]) == 1.0
        with pytest.raises(ValueError):
            mean_iou([])

    def test_mask_iou(self):
        a = np.zeros((4, 4), bool)
        a[:2] = True
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, ~a) == 0.0


rect_st = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20)).map(
    lambda t: rect(t[0], t[1], t[0] + t[2], t[1] + t[3]))
rect_sets = st.lists(rect_st, min_size=0, max_size=4)


@settings(max_examples=120, deadline=None)
@given(rect_sets, rect_sets)
def test_union_iou_matches_brute_force_on_rectangles(gt, pred):
    pair = RegionSetPair(gt, pred, (48, 48))
    assert union_iou(pair) == pytest.approx(brute_force_union_iou(gt, pred, (48, 48)), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(rect_sets, rect_sets)
def test_union_iou_symmetric_and_bounded(gt, pred):
    a = union_iou(RegionSetPair(gt, pred, (48, 48)))
    b = union_iou(RegionSetPair(pred, gt, (48, 48)))
    assert a == b
    assert 0.0 <= a <= 1.0


class TestEditDistance:
    @pytest.mark.parametrize("a,b,d", [("", "abc", 3), ("TEA", "TEA", 0), ("TEA", "SEAT", 2),
                                       ("kitten", "sitting", 3), ("", "", 0)])
    def test_examples(self, a, b, d):
        assert edit_distance(a, b) == d

    def test_matches_recursive_oracle_exhaustively(self):
        words = ["".join(p) for n in range(4) for p in itertools.product("ab", repeat=n)]
        for a in words:
            for b in words:
                assert edit_distance(a, b) == recursive_edit_distance(a, b)

    @settings(max_examples=200, deadline=None)
    @given(st.text("abc", max_size=7), st.text("abc", max_size=7), st.text("abc", max_size=7))
    def test_metric_axioms(self, a, b, c):
        assert edit_distance(a, b) >= 0
        assert (edit_distance(a, b) == 0) == (a == b)
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


class TestTextMetrics:
    def test_char_accuracy_examples(self):
        assert char_accuracy("TEA", "TEA") == 100.0
        assert char_accuracy("TEA", "SEA") == pytest.approx(66.67, abs=0.01)
        assert char_accuracy("A", "BCDE") == 0.0

    def test_both_empty(self, caplog):
        assert char_accuracy("", "") == 100.0
        assert "two empty strings" in caplog.text

    @settings(max_examples=150, deadline=None)
    @given(st.text("abcd", max_size=8), st.text("abcd", max_size=8))
    def test_char_accuracy_range(self, a, b):
        if not a and not b:
            return
        v = char_accuracy(a, b)
        assert 0.0 <= v <= 100.0
        assert (v == 100.0) == (a == b)

    def test_text_accuracy(self):
        assert text_accuracy([("TEA", "TEA"), ("SHOP", "SHOP")]) == 100.0
        assert text_accuracy([("TEA", "TEA"), ("SHOP", "SHOE")]) == 50.0
        assert text_accuracy([("Tea", "TEA")]) == 0.0
        with pytest.raises(ValueError):
            text_accuracy([])

    def test_binary_accuracy(self):
        assert binary_accuracy([1, 0, 1, 0], [1, 0, 1, 0]) == 100.0
        assert binary_accuracy([1, 0, 1, 0], [1, 0, 1, 1]) == 75.0
        with pytest.raises(ValueError):
            binary_accuracy([1, 0], [1])
        with pytest.raises(ValueError):
            binary_accuracy([], [])

    def test_confusion(self):
        assert confusion_counts([1, 1, 0, 0], [1, 0, 1, 0]) == {"tp": 1, "fp": 1, "tn": 1, "fn": 1}
