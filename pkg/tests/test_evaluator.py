import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtface.evaluator import average_precision, evaluate_detections, landmark_nme, pose_mae
from mtface.geometry import Box, LandmarkSet
from mtface.model import Detections
from mtface.synthworld import Scene, SceneFace

GT2 = [np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])]


def _pr_area_oracle(tps, n_gt):
    """Brute-force all-points AP: precision envelope summed at each recall step."""
    prec, rec = [], []
    for k in range(1, len(tps) + 1):
        prec.append(sum(tps[:k]) / k)
        rec.append(sum(tps[:k]) / n_gt)
    area, last = 0.0, 0.0
    for k in range(len(tps)):
        if rec[k] > last:
            area += (rec[k] - last) * max(prec[k:])
            last = rec[k]
    return area


def test_perfect_detection():
    assert average_precision([GT2[0]], [np.array([0.9, 0.8])], GT2) == 1.0


def test_below_threshold_is_zero():
    gt = [np.array([[0, 0, 10, 10.0]])]
    det = np.array([[0, 0, 10, 4.0]])  # IoU 0.4
    assert average_precision([det], [np.array([0.9])], gt) == 0.0


def test_five_sixths_example():
    dets = np.array([[0, 0, 10, 10], [40, 40, 50, 50], [20, 20, 30, 30.0]])
    ap = average_precision([dets], [np.array([0.9, 0.8, 0.7])], GT2)
    assert ap == pytest.approx(5 / 6, abs=1e-15)
    assert ap == pytest.approx(_pr_area_oracle([1, 0, 1], 2), abs=1e-15)


def test_no_gt_is_absent():
    assert average_precision([np.zeros((1, 4)) + [0, 0, 1, 1]], [np.array([0.5])], [np.zeros((0, 4))]) is None


def _random_case(seed):
    rng = np.random.default_rng(seed)
    gts, dets, scores = [], [], []
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(0, 4))
        g = np.concatenate([rng.uniform(0, 40, size=(n, 2)), np.zeros((n, 2))], axis=1)
        g[:, 2:] = g[:, :2] + rng.uniform(8, 20, size=(n, 2))
        d = np.concatenate([g + rng.normal(scale=3, size=g.shape), g[:1] + 50]) if n else np.array([[1, 1, 5, 5.0]])
        d[:, 2:] = np.maximum(d[:, 2:], d[:, :2] + 1)
        gts.append(g)
        dets.append(d)
        scores.append(rng.random(len(d)))
    return dets, scores, gts


@given(st.integers(0, 100_000), st.floats(0.01, 100))
def test_ap_depends_on_rank_only(seed, scale):
    d, s, g = _random_case(seed)
    a = average_precision(d, s, g)
    b = average_precision(d, [x * scale for x in s], g)
    assert (a is None and b is None) or a == pytest.approx(b, abs=1e-15)


@given(st.integers(0, 100_000))
def test_injected_top_fp_never_raises_ap(seed):
    d, s, g = _random_case(seed)
    a = average_precision(d, s, g)
    if a is None:
        return
    d2 = [np.concatenate([d[0], [[200, 200, 210, 210.0]]])] + d[1:]
    s2 = [np.concatenate([s[0], [2.0]])] + s[1:]
    assert average_precision(d2, s2, g) <= a + 1e-15


@given(st.integers(0, 100_000))
def test_single_scene_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_gt = int(rng.integers(1, 5))
    tps = list(rng.random(int(rng.integers(1, 8))) < 0.5)
    tps = tps[:]  # TP count may not exceed GT count
    while sum(tps) > n_gt:
        tps[tps.index(True)] = False
    gt = np.array([[30 * i, 0, 30 * i + 10, 10.0] for i in range(n_gt)])
    dets, k = [], 0
    for i, t in enumerate(tps):
        if t:
            dets.append(gt[k])
            k += 1
        else:
            dets.append([500 + 20 * i, 500, 510 + 20 * i, 510])
    scores = np.linspace(1, 0.1, len(tps))
    ap = average_precision([np.array(dets, dtype=float)], [scores], [gt])
    assert ap == pytest.approx(_pr_area_oracle([int(t) for t in tps], n_gt), abs=1e-12)


def test_scale_split_ignores_other_sizes():
    gt = [np.array([[0, 0, 10, 10], [20, 20, 60, 60.0]])]
    dets = [np.array([[20, 20, 60, 60], [0, 0, 10, 10.0]])]
    scores = [np.array([0.9, 0.5])]
    # the large face's detection is ignored in the small split, not a false positive
    assert average_precision(dets, scores, gt, scale_range=(0, 25)) == 1.0
    assert average_precision(dets, scores, gt, scale_range=(25, 96)) == 1.0
    assert average_precision(dets, scores, gt, scale_range=(96, np.inf)) is None


def test_nme_examples():
    gt = np.arange(10.0).reshape(5, 2)
    box = Box(0, 0, 25, 25)
    assert landmark_nme(gt, gt, box) == 0.0
    assert landmark_nme(gt + [3, 4], gt, box) == pytest.approx(0.2, abs=1e-15)


@given(st.integers(0, 100_000), st.floats(0.1, 10))
def test_nme_matches_hand_sum_and_is_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(0, 30, size=(5, 2)), rng.uniform(0, 30, size=(5, 2))
    box = Box(0, 0, float(rng.uniform(5, 30)), float(rng.uniform(5, 30)))
    ref = sum(np.hypot(*(p[i] - g[i])) for i in range(5)) / 5 / np.sqrt(box.width * box.height)
    assert landmark_nme(LandmarkSet.from_array(p), LandmarkSet.from_array(g), box) == pytest.approx(ref, rel=1e-12)
    assert landmark_nme(p * k, g * k, box.scaled(k)) == pytest.approx(ref, rel=1e-9)


def test_pose_mae_examples(rng):
    g = rng.uniform(-60, 60, size=(6, 3))
    assert pose_mae(g, g) == {"yaw": 0.0, "pitch": 0.0, "roll": 0.0, "mean": 0.0}
    m = pose_mae(g + [3, 0, 0], g)
    assert m["yaw"] == pytest.approx(3.0) and m["mean"] == pytest.approx(1.0)
    p = g + rng.normal(size=g.shape)
    m = pose_mae(p, g)
    assert m["roll"] == pytest.approx(sum(abs(p[i, 2] - g[i, 2]) for i in range(6)) / 6, rel=1e-12)


def test_evaluate_detections_end_to_end():
    lm = LandmarkSet.from_array(np.full((5, 2), 20.0))
    face = SceneFace(Box(10, 10, 30, 30), lm, (10.0, 0.0, 0.0), True, True, (20, 20, 20, 10, 0, 0))
    scene = Scene(64, [face])
    det = Detections(np.array([[10, 10, 30, 30.0]]), np.array([0.9]),
                     np.full((1, 5, 2), 20.0) + [0, 2], np.array([[13.0, 0, 0]]), np.array([0]))
    r = evaluate_detections([scene], [det])
    assert r.ap == 1.0 and r.ap_small == 1.0 and r.ap_medium is None
    assert r.nme == pytest.approx(2 / 20)
    assert r.mae_yaw == pytest.approx(3.0) and r.n_pose_matched == 1
    assert r.counts == {"small": 1, "medium": 0, "large": 0}
