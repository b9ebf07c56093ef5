import numpy as np
import pytest
import torch

from querytrack.boxes import (
    CXCYWH_NORM,
    LTWH_PIXELS,
    XYXY_PIXELS,
    BoundingBox,
    LabeledBox,
    convert,
    giou,
    giou_tensor,
    iou,
    iou_matrix_ltwh,
)

from conftest import finite_difference, rel_err


def corner_box(x1, y1, x2, y2, scale=1.0):
    return BoundingBox.from_xyxy(x1 * scale, y1 * scale, x2 * scale, y2 * scale)


class TestBoundingBox:
    def test_clamps_small_drift(self):
        b = BoundingBox(1.0 + 5e-7, -5e-7, 0.5, 0.5)
        assert b.cx == 1.0 and b.cy == 0.0

    def test_rejects_large_violation(self):
        with pytest.raises(ValueError):
            BoundingBox(1.1, 0.5, 0.5, 0.5)

    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            BoundingBox(0.5, 0.5, 0.0, 0.5)
        with pytest.raises(ValueError):
            BoundingBox(0.5, 0.5, 0.5, -0.1)

    def test_xyxy_round_trip_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            w, h = rng.uniform(0.05, 0.4, size=2)
            b = BoundingBox(cx, cy, w, h)
            rt = BoundingBox.from_xyxy(*b.as_xyxy())
            assert abs(rt.cx - b.cx) < 1e-12
            assert abs(rt.cy - b.cy) < 1e-12
            assert abs(rt.w - b.w) < 1e-12
            assert abs(rt.h - b.h) < 1e-12

    def test_labeled_box_validation(self):
        b = BoundingBox(0.5, 0.5, 0.2, 0.2)
        LabeledBox(box=b, class_id=0, score=0.5, identity=3)
        with pytest.raises(ValueError):
            LabeledBox(box=b, score=1.5)
        with pytest.raises(ValueError):
            LabeledBox(box=b, identity=-2)


class TestIou:
    def test_identical(self):
        b = BoundingBox(0.5, 0.5, 0.4, 0.4)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        a = corner_box(0, 0, 1, 1, scale=0.25)
        b = corner_box(2, 0, 3, 1, scale=0.25)
        assert iou(a, b) == 0.0

    def test_derived_overlap(self):
        # corners (0,0,2,2) and (1,1,3,3) scaled by 1/4: inter 1, union 7
        a = corner_box(0, 0, 2, 2, scale=0.25)
        b = corner_box(1, 1, 3, 3, scale=0.25)
        assert abs(iou(a, b) - 1.0 / 7.0) < 1e-12


class TestGiou:
    def test_identical(self):
        b = BoundingBox(0.3, 0.6, 0.2, 0.3)
        assert giou(b, b) == 1.0

    def test_abutting_is_zero(self):
        a = corner_box(0, 0, 1, 1, scale=0.5)
        b = corner_box(1, 0, 2, 1, scale=0.5)
        assert abs(giou(a, b)) < 1e-12

    def test_separated_negative(self):
        a = corner_box(0, 0, 1, 1, scale=1 / 3)
        b = corner_box(2, 0, 3, 1, scale=1 / 3)
        assert abs(giou(a, b) - (-1.0 / 3.0)) < 1e-12

    def test_contained_equals_iou(self):
        outer = BoundingBox(0.5, 0.5, 0.8, 0.8)
        inner = BoundingBox(0.5, 0.5, 0.2, 0.2)
        assert abs(giou(outer, inner) - iou(outer, inner)) < 1e-12

    def test_order_and_range_property(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            cx, cy, cx2, cy2 = rng.uniform(0.1, 0.9, size=4)
            w, h, w2, h2 = rng.uniform(0.02, 0.2, size=4)
            a = BoundingBox(cx, cy, w, h)
            b = BoundingBox(cx2, cy2, w2, h2)
            g = giou(a, b)
            i = iou(a, b)
            assert -1.0 - 1e-12 <= g <= i + 1e-12 <= 1.0 + 1e-12
            assert abs(g - giou(b, a)) < 1e-12

    def test_matches_area_arithmetic_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            ax1, ay1 = rng.uniform(0.0, 0.6, size=2)
            aw, ah = rng.uniform(0.05, 0.35, size=2)
            bx1, by1 = rng.uniform(0.0, 0.6, size=2)
            bw, bh = rng.uniform(0.05, 0.35, size=2)
            a = BoundingBox.from_xyxy(ax1, ay1, ax1 + aw, ay1 + ah)
            b = BoundingBox.from_xyxy(bx1, by1, bx1 + bw, by1 + bh)
            iw = max(min(ax1 + aw, bx1 + bw) - max(ax1, bx1), 0.0)
            ih = max(min(ay1 + ah, by1 + bh) - max(ay1, by1), 0.0)
            inter = iw * ih
            union = aw * ah + bw * bh - inter
            enc = (max(ax1 + aw, bx1 + bw) - min(ax1, bx1)) * (max(ay1 + ah, by1 + bh) - min(ay1, by1))
            assert abs(iou(a, b) - inter / union) < 1e-12
            assert abs(giou(a, b) - (inter / union - (enc - union) / enc)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 20:
            vals = rng.uniform(0.25, 0.75, size=4)
            sizes = rng.uniform(0.1, 0.3, size=4)
            x = torch.tensor(
                [[vals[0], vals[1], sizes[0], sizes[1]], [vals[2], vals[3], sizes[2], sizes[3]]],
                dtype=torch.float64,
                requires_grad=True,
            )
            # skip near corner-coincidence singularities of min/max: every
            # compared corner pair must stay on one branch across the FD step
            ax1, ay1 = vals[0] - sizes[0] / 2, vals[1] - sizes[1] / 2
            ax2, ay2 = vals[0] + sizes[0] / 2, vals[1] + sizes[1] / 2
            bx1, by1 = vals[2] - sizes[2] / 2, vals[3] - sizes[3] / 2
            bx2, by2 = vals[2] + sizes[2] / 2, vals[3] + sizes[3] / 2
            margin = 5e-3
            gaps = [abs(ax1 - bx1), abs(ax2 - bx2), abs(ay1 - by1), abs(ay2 - by2),
                    abs(min(ax2, bx2) - max(ax1, bx1)), abs(min(ay2, by2) - max(ay1, by1))]
            if min(gaps) < margin:
                continue
            fn = lambda t: giou_tensor(t[0], t[1])
            out = fn(x)
            (g,) = torch.autograd.grad(out, x)
            fd = finite_difference(lambda t: fn(t), x.detach().clone(), eps=1e-3)
            assert rel_err(g, fd) < 1e-4
            checked += 1


class TestConvert:
    def test_full_image(self):
        out = convert((0.5, 0.5, 1.0, 1.0), CXCYWH_NORM, XYXY_PIXELS, image_size=(640, 640))
        assert out == (0.0, 0.0, 640.0, 640.0)

    def test_ltwh_to_normalized(self):
        out = convert((10, 20, 30, 40), LTWH_PIXELS, CXCYWH_NORM, image_size=(100, 200))
        assert np.allclose(out, (0.25, 0.20, 0.30, 0.20), atol=1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            box = tuple(rng.uniform(0.1, 0.4, size=4))
            size = (int(rng.integers(100, 2000)), int(rng.integers(100, 2000)))
            for fmt in (XYXY_PIXELS, LTWH_PIXELS):
                there = convert(box, CXCYWH_NORM, fmt, image_size=size)
                back = convert(there, fmt, CXCYWH_NORM, image_size=size)
                assert np.allclose(back, box, atol=1e-9)

    def test_composition_equals_direct(self):
        box = (0.4, 0.3, 0.2, 0.1)
        size = (640, 480)
        via = convert(convert(box, CXCYWH_NORM, XYXY_PIXELS, size), XYXY_PIXELS, LTWH_PIXELS, size)
        direct = convert(box, CXCYWH_NORM, LTWH_PIXELS, size)
        assert np.allclose(via, direct, atol=1e-9)

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="unknown box format"):
            convert((0, 0, 1, 1), "yolo", CXCYWH_NORM)

    def test_pixel_needs_size(self):
        with pytest.raises(ValueError, match="image_size"):
            convert((0, 0, 1, 1), LTWH_PIXELS, CXCYWH_NORM)


def test_iou_matrix_ltwh_matches_scalar():
    rng = np.random.default_rng(9)
    a = np.column_stack([rng.uniform(0, 50, 5), rng.uniform(0, 50, 5), rng.uniform(5, 30, 5), rng.uniform(5, 30, 5)])
    b = np.column_stack([rng.uniform(0, 50, 4), rng.uniform(0, 50, 4), rng.uniform(5, 30, 4), rng.uniform(5, 30, 4)])
    m = iou_matrix_ltwh(a, b)
    for i in range(5):
        for j in range(4):
            ba = BoundingBox.from_xyxy(a[i, 0] / 100, a[i, 1] / 100, (a[i, 0] + a[i, 2]) / 100, (a[i, 1] + a[i, 3]) / 100)
            bb = BoundingBox.from_xyxy(b[j, 0] / 100, b[j, 1] / 100, (b[j, 0] + b[j, 2]) / 100, (b[j, 1] + b[j, 3]) / 100)
            assert abs(m[i, j] - iou(ba, bb)) < 1e-9
