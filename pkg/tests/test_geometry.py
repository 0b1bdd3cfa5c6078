import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrpn.geometry import (
    Box,
    BoxDelta,
    DegenerateBoxError,
    decode_array,
    decode_deltas,
    encode_array,
    encode_deltas,
    iou,
    iou_matrix,
    smooth_l1,
)


def pixel_iou(a: Box, b: Box) -> float:
    """Count unit pixels covered by each integer box."""
    size = int(max(a.x2, b.x2)) + 1, int(max(a.y2, b.y2)) + 1
    xs, ys = np.meshgrid(np.arange(size[0]), np.arange(size[1]), indexing="ij")

    def mask(box):
        return (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


@st.composite
def int_boxes(draw, limit=50):
    x1 = draw(st.integers(0, limit))
    y1 = draw(st.integers(0, limit))
    x2 = draw(st.integers(x1, limit))
    y2 = draw(st.integers(y1, limit))
    return Box(x1, y1, x2, y2)


def random_boxes(rng, n, min_side=0.0):
    xy = rng.uniform(-100, 100, size=(n, 2))
    wh = rng.uniform(min_side, 80, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestIoU:
    def test_identity(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        a, b = Box(0, 0, 10, 10), Box(5, 0, 15, 10)
        assert pixel_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
        assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_touching_edges(self):
        assert iou(Box(0, 0, 10, 10), Box(10, 0, 20, 10)) == 0.0

    def test_degenerate_is_zero(self):
        assert iou(Box(5, 5, 5, 5), Box(5, 5, 5, 5)) == 0.0
        assert iou(Box(0, 0, 0, 10), Box(0, 0, 10, 10)) == 0.0

    def test_bad_corner_order(self):
        with pytest.raises(ValueError):
            Box(10, 0, 0, 10)

    @settings(max_examples=300, deadline=None)
    @given(int_boxes(), int_boxes())
    def test_matches_pixel_oracle(self, a, b):
        assert abs(iou(a, b) - pixel_iou(a, b)) < 1e-6

    def test_symmetric_and_bounded_10k(self):
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 10_000)
        b = random_boxes(rng, 10_000)
        for ra, rb in zip(a, b):
            x, y = Box(*ra), Box(*rb)
            v = iou(x, y)
            assert 0.0 <= v <= 1.0
            assert v == iou(y, x)

    def test_self_iou_is_one(self):
        rng = np.random.default_rng(1)
        for row in random_boxes(rng, 500, min_side=0.1):
            assert iou(Box(*row), Box(*row)) == pytest.approx(1.0, abs=1e-15)

    def test_matrix_matches_scalar_exactly(self):
        rng = np.random.default_rng(2)
        a = random_boxes(rng, 40)
        b = random_boxes(rng, 7)
        m = iou_matrix(a, b)
        for i in range(len(a)):
            for j in range(len(b)):
                assert m[i, j] == iou(Box(*a[i]), Box(*b[j]))


class TestDeltas:
    def test_self_encoding_is_zero(self):
        b = Box(3, 4, 17, 30)
        assert encode_deltas(b, b).as_tuple() == (0.0, 0.0, 0.0, 0.0)

    def test_identity_delta(self):
        b = Box(3, 4, 17, 30)
        assert decode_deltas(b, BoxDelta(0, 0, 0, 0)) == b

    def test_doubling(self):
        d = encode_deltas(Box(0, 0, 10, 10), Box(0, 0, 20, 20))
        assert d.dx == pytest.approx(0.5)
        assert d.dy == pytest.approx(0.5)
        assert d.dw == pytest.approx(math.log(2))
        assert d.dh == pytest.approx(math.log(2))

    def test_degenerate_anchor_raises(self):
        with pytest.raises(DegenerateBoxError):
            encode_deltas(Box(0, 0, 0, 10), Box(0, 0, 5, 5))
        with pytest.raises(DegenerateBoxError):
            decode_deltas(Box(0, 0, 10, 0), BoxDelta(0, 0, 0, 0))

    def test_round_trip_10k(self):
        rng = np.random.default_rng(3)
        anchors = random_boxes(rng, 10_000, min_side=1.0)
        gts = random_boxes(rng, 10_000, min_side=1.0)
        back = decode_array(anchors, encode_array(anchors, gts))
        scale = np.maximum(np.abs(gts), 1.0)
        assert np.max(np.abs(back - gts) / scale) < 1e-9

    def test_scalar_and_array_agree(self):
        a, g = Box(1, 2, 11, 32), Box(-4, 7, 40, 19)
        d = encode_deltas(a, g)
        arr = encode_array(np.array([a.as_tuple()]), np.array([g.as_tuple()]))[0]
        np.testing.assert_allclose(arr, d.as_tuple(), rtol=1e-15)
        back = decode_deltas(a, d)
        np.testing.assert_allclose(back.as_tuple(), g.as_tuple(), rtol=1e-12)


class TestSmoothL1:
    def test_zero_residual(self):
        d = [BoxDelta(0.1, -0.2, 0.3, 0.4)]
        assert smooth_l1(d, d) == 0.0

    @pytest.mark.parametrize("r, expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_single_coordinate(self, r, expected):
        assert smooth_l1(np.array([r]), np.array([0.0])) == pytest.approx(expected, abs=1e-15)

    def test_mean_over_coordinates(self):
        pred = [BoxDelta(0.5, 2.0, 0.0, 0.0)]
        assert smooth_l1(pred, [BoxDelta(0, 0, 0, 0)]) == pytest.approx((0.125 + 1.5) / 4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1([BoxDelta(0, 0, 0, 0)], [])

    def test_continuous_and_smooth_at_one(self):
        def f(r):
            return smooth_l1(np.array([r]), np.array([0.0]))

        h = 1e-7
        assert abs(f(1 - 1e-12) - f(1 + 1e-12)) < 1e-9
        left = (f(1.0) - f(1.0 - h)) / h
        right = (f(1.0 + h) - f(1.0)) / h
        assert abs(left - right) < 1e-6
