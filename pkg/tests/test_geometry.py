import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtface.geometry import Box, LandmarkSet, face_scale, iou, is_small_face

coord = st.floats(-50, 50)
side = st.floats(0.5, 40)


def test_iou_examples():
    assert iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1)) == 1.0
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0


@given(coord, coord, side, side, coord, coord, side, side)
def test_iou_symmetric_and_bounded(x, y, w, h, u, v, a, b):
    p, q = Box(x, y, x + w, y + h), Box(u, v, u + a, v + b)
    assert iou(p, q) == pytest.approx(iou(q, p), abs=1e-15)
    assert 0.0 <= iou(p, q) <= 1.0
    assert iou(p, p) == pytest.approx(1.0, abs=1e-12)


@given(coord, coord, side, side, st.lists(st.floats(0, 5), min_size=2, max_size=8))
def test_iou_nonincreasing_under_translation(x, y, w, h, steps):
    b = Box(x, y, x + w, y + h)
    shifts = np.cumsum(steps)
    vals = [iou(b, Box(x + s, y, x + w + s, y + h)) for s in shifts]
    assert all(v1 >= v2 - 1e-12 for v1, v2 in zip(vals, vals[1:]))


@pytest.mark.parametrize("w, h, small", [(24, 24, True), (25, 25, True), (26, 20, False)])
def test_small_face_threshold_is_inclusive(w, h, small):
    assert is_small_face(Box(0, 0, w, h)) is small


@pytest.mark.parametrize("w, h, s", [(10, 10, 10.0), (4, 9, 6.0), (25, 25, 25.0)])
def test_face_scale(w, h, s):
    assert face_scale(Box(3, 5, 3 + w, 5 + h)) == pytest.approx(s, abs=1e-12)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)


def test_scaling_maps_box_and_landmarks_together():
    b = Box(10, 20, 30, 40).scaled(0.5, 32, 0)
    assert (b.x1, b.y1, b.x2, b.y2) == (37, 10, 47, 20)
    lm = LandmarkSet.from_array(np.arange(10.0).reshape(5, 2)).scaled(0.5, 32, 0)
    np.testing.assert_allclose(lm.as_array()[1], [33.0, 1.5])
