import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxtrack import autograd as ag
from ctxtrack.autograd import Tensor
from ctxtrack.head import (BBox, CenterHead, ScoreMaps, decode_bbox, decode_boxes, giou, head_forward, iou_giou,
                           total_loss, weighted_loss)


def maps_from(cls, size=None, offset=None):
    cls = np.asarray(cls, dtype=float)
    b, g, _ = cls.shape
    size = np.full((b, 2, g, g), 0.25) if size is None else size
    offset = np.zeros((b, 2, g, g)) if offset is None else offset
    logit = np.log(cls / (1 - cls))
    return ScoreMaps(Tensor(cls), Tensor(size), Tensor(offset), Tensor(logit))


class TestHeadForward:
    def test_zero_features_half_presence(self):
        head = CenterHead(8, 6, np.random.default_rng(0))
        head.cls.out.bias.data[:] = 0.0
        maps = head(Tensor(np.zeros((1, 16, 8))))
        np.testing.assert_allclose(maps.cls.data, 0.5, atol=1e-15)

    def test_grid_shapes(self):
        head = CenterHead(8, 6, np.random.default_rng(1))
        maps = head(Tensor(np.random.default_rng(2).normal(size=(3, 16, 8))))
        assert maps.cls.shape == (3, 4, 4)
        assert maps.size.shape == maps.offset.shape == (3, 2, 4, 4)
        assert maps.grid == 4

    def test_non_square_rejected(self):
        head = CenterHead(8, 6, np.random.default_rng(3))
        with pytest.raises(ValueError, match="square"):
            head_forward(head, Tensor(np.zeros((1, 15, 8))))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (1, 16, 8), elements=st.floats(-1e3, 1e3)))
    def test_finite_and_decodes_inside_unit_square(self, f):
        head = CenterHead(8, 6, np.random.default_rng(4))
        maps = head(Tensor(f))
        for m in (maps.cls, maps.size, maps.offset):
            assert np.all(np.isfinite(m.data))
        box = decode_bbox(maps)  # constructor enforces the unit-square intersection
        assert box.w > 0 and box.h > 0


class TestDecode:
    def test_single_peak(self):
        cls = np.full((1, 4, 4), 0.1)
        cls[0, 2, 3] = 0.9
        box = decode_bbox(maps_from(cls))
        assert (box.cx, box.cy, box.w, box.h) == pytest.approx((0.875, 0.625, 0.25, 0.25))

    def test_uniform_ties_pick_first_cell(self):
        box = decode_bbox(maps_from(np.full((1, 4, 4), 0.3)))
        assert (box.cx, box.cy) == pytest.approx((0.125, 0.125))

    def test_offset_half_cell(self):
        cls = np.full((1, 4, 4), 0.1)
        cls[0, 1, 1] = 0.8
        base = decode_bbox(maps_from(cls))
        shifted = decode_bbox(maps_from(cls, offset=np.full((1, 2, 4, 4), 0.5)))
        assert shifted.cx - base.cx == pytest.approx(0.5 / 4)
        assert shifted.cy - base.cy == pytest.approx(0.5 / 4)

    def test_batch_scores(self):
        cls = np.full((2, 4, 4), 0.1)
        cls[0, 0, 2], cls[1, 3, 0] = 0.7, 0.6
        boxes, scores = decode_boxes(maps_from(cls))
        np.testing.assert_allclose(scores, [0.7, 0.6])
        np.testing.assert_allclose(boxes[:, :2], [[2.5 / 4, 0.5 / 4], [0.5 / 4, 3.5 / 4]])


class TestGiou:
    def test_identical(self):
        b = BBox(0.3, 0.6, 0.2, 0.5)
        assert giou(b, b) == 1.0
        assert 1.0 - giou(b, b) == 0.0

    def test_corner_touch(self):
        assert giou(BBox.from_corners(0, 0, 1, 1), BBox.from_corners(1, 1, 2, 2)) == -0.5

    def test_partial_overlap(self):
        val = giou(BBox.from_corners(0, 0, 2, 2), BBox.from_corners(1, 1, 3, 3))
        assert val == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)
        assert val == pytest.approx(-5 / 63, abs=1e-15)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            giou(BBox(0.5, 0.5, 0.2, 0.2), BBox(0.5, 0.5, 0.0, 0.2))

    def test_outside_unit_square_rejected(self):
        with pytest.raises(ValueError):
            BBox(3.0, 3.0, 0.5, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.floats(0.05, 0.95)] * 2, *[st.floats(0.01, 0.8)] * 2),
           st.tuples(*[st.floats(0.05, 0.95)] * 2, *[st.floats(0.01, 0.8)] * 2))
    def test_symmetric_and_bounded(self, a, b):
        b1, b2 = BBox(*a), BBox(*b)
        g = giou(b1, b2)
        assert g == pytest.approx(giou(b2, b1), abs=1e-15)
        assert -1.0 <= g <= 1.0
        iou, _ = iou_giou(np.array(a), np.array(b))
        assert g <= iou + 1e-15

    def test_containment_equals_iou(self):
        outer, inner = np.array([0.5, 0.5, 0.6, 0.6]), np.array([0.45, 0.55, 0.2, 0.1])
        iou, g = iou_giou(outer, inner)
        assert g == iou


def numpy_loss(cls_logit, size, offset, gt, lambda1=5.0, lambda2=2.0):
    """Independent re-derivation of the tracking loss."""
    b, g, _ = cls_logit.shape
    total_cls, total_l1, total_giou = 0.0, 0.0, 0.0
    n_pos = 0
    for i in range(b):
        cx, cy, w, h = gt[i]
        col, row = min(int(cx * g), g - 1), min(int(cy * g), g - 1)
        sigma = max(0.5, np.sqrt(w * h) * g / 4)
        for r in range(g):
            for c in range(g):
                y = np.exp(-((r - row) ** 2 + (c - col) ** 2) / (2 * sigma ** 2))
                p = 1 / (1 + np.exp(-cls_logit[i, r, c]))
                if r == row and c == col:
                    total_cls -= (1 - p) ** 2 * np.log(p)
                    n_pos += 1
                else:
                    total_cls -= (1 - y) ** 4 * p ** 2 * np.log(1 - p)
        px = (col + 0.5 + offset[i, 0, row, col]) / g
        py = (row + 0.5 + offset[i, 1, row, col]) / g
        pw, ph = size[i, 0, row, col], size[i, 1, row, col]
        total_l1 += (abs(px - cx) + abs(py - cy) + abs(pw - w) + abs(ph - h)) / 4
        total_giou += 1 - giou(BBox(px, py, pw, ph), BBox(cx, cy, w, h))
    l_cls, l_1, l_g = total_cls / n_pos, total_l1 / b, total_giou / b
    return l_cls + lambda1 * l_1 + lambda2 * l_g, (l_cls, l_1, l_g)


class TestTotalLoss:
    def test_default_weights(self):
        assert weighted_loss(0.2, 0.1, 0.3) == pytest.approx(1.3, abs=1e-15)

    def test_perfect_prediction(self):
        gt = np.array([[0.6, 0.35, 0.3, 0.2]])
        size = np.zeros((1, 2, 4, 4))
        offset = np.zeros((1, 2, 4, 4))
        size[0, :, 1, 2] = [0.3, 0.2]
        offset[0, :, 1, 2] = [0.6 * 4 - 2.5, 0.35 * 4 - 1.5]
        cls = np.full((1, 4, 4), 0.2)
        _, parts = total_loss(maps_from(cls, size, offset), gt)
        assert parts["l1"] == pytest.approx(0.0, abs=1e-15)
        assert parts["giou"] == pytest.approx(0.0, abs=1e-15)

    def test_outside_rejected(self):
        with pytest.raises(ValueError):
            total_loss(maps_from(np.full((1, 4, 4), 0.5)), np.array([[1.2, 0.5, 0.2, 0.2]]))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            total_loss(maps_from(np.full((1, 4, 4), 0.5)), np.array([[0.5, 0.5, 0.2, 0.2]]), lambda1=-1)

    def test_matches_independent_computation(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            b = 3
            logit = rng.normal(size=(b, 4, 4))
            size = rng.uniform(0.05, 0.9, (b, 2, 4, 4))
            offset = rng.uniform(-0.5, 0.5, (b, 2, 4, 4))
            gt = np.column_stack([rng.uniform(0, 1, (b, 2)), rng.uniform(0.05, 0.6, (b, 2))])
            maps = ScoreMaps(Tensor(1 / (1 + np.exp(-logit))), Tensor(size), Tensor(offset), Tensor(logit))
            loss, parts = total_loss(maps, gt)
            ref, (c, l1, lg) = numpy_loss(logit, size, offset, gt)
            assert abs(loss.item() - ref) <= 1e-12
            assert abs(loss.item() - (parts["cls"] + 5 * parts["l1"] + 2 * parts["giou"])) <= 1e-12
            assert parts["cls"] == pytest.approx(c, abs=1e-12)

    def test_nonnegative_and_differentiable(self):
        rng = np.random.default_rng(6)
        head = CenterHead(4, 4, rng)
        f = ag.parameter(rng.normal(size=(2, 16, 4)))
        gt = np.array([[0.3, 0.3, 0.2, 0.3], [0.8, 0.55, 0.25, 0.1]])
        loss, _ = total_loss(head(f), gt)
        assert loss.item() >= 0
        assert ag.grad_check_many(lambda: total_loss(head(f), gt)[0], head.parameters() + [f]) < 1e-4
