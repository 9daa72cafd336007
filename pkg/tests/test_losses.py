import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from mtface.gradcheck import loss_case, uml_case
from mtface.losses import (HEURISTIC_WEIGHTS, TaskLosses, UMLParams, box_loss, cls_loss, ohem_select,
                           per_anchor_ce, pose_loss, pts_loss, uml_combine, uml_stationary_point, weighted_combine)
from mtface.numerics import smooth_l1
from mtface.pose_codec import N_BINS


def _ohem_oracle(ce, labels, ratio=3, min_neg=0):
    """Brute force: sort negatives by (loss desc, index asc) with plain Python."""
    pos = [i for i, l in enumerate(labels) if l == 1]
    neg = sorted((i for i, l in enumerate(labels) if l == 0), key=lambda i: (-ce[i], i))
    k = min(ratio * len(pos) if pos else min_neg, len(neg))
    return set(pos) | set(neg[:k])


def test_ohem_counts():
    labels = np.array([1] * 4 + [0] * 100)
    ce = np.linspace(0, 1, 104)
    assert ohem_select(ce, labels).sum() == 4 + 12
    labels = np.array([1] * 4 + [0] * 5)
    assert ohem_select(np.ones(9), labels).sum() == 9


def test_ohem_ties_go_to_lowest_index():
    labels = np.array([1, 0, 0, 0, 0, 0])
    sel = ohem_select(np.array([0.1, 0.5, 0.5, 0.5, 0.5, 0.2]), labels)
    assert list(np.flatnonzero(sel)) == [0, 1, 2, 3]


def test_ohem_ignores_ignored_anchors():
    labels = np.array([1, -1, -1, 0])
    sel = ohem_select(np.array([0.0, 9.0, 9.0, 0.1]), labels)
    assert list(np.flatnonzero(sel)) == [0, 3]


@given(st.integers(0, 100_000))
def test_ohem_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 80))
    labels = rng.choice([1, 0, 0, 0, -1], size=n)
    ce = np.round(rng.random(n), 2)  # rounding creates ties
    sel = ohem_select(ce, labels)
    assert set(np.flatnonzero(sel)) == _ohem_oracle(ce, labels)
    n_pos, n_neg = int((labels == 1).sum()), int((labels == 0).sum())
    assert int((sel & (labels == 0)).sum()) == min(3 * n_pos, n_neg)


def test_ohem_without_positives():
    labels = np.array([0, 0, 0, 0, 0])
    ce = np.array([0.1, 0.9, 0.3, 0.8, 0.2])
    assert not ohem_select(ce, labels).any()
    assert list(np.flatnonzero(ohem_select(ce, labels, min_negatives=3))) == [1, 2, 3]


def test_cls_loss_examples():
    labels = np.array([1, 0, 0])
    sel = np.ones(3, dtype=bool)
    perfect = np.array([[-1000.0, 1000.0], [1000.0, -1000.0], [1000.0, -1000.0]])
    assert cls_loss(perfect, labels, sel)[0] == pytest.approx(0.0, abs=1e-12)
    assert cls_loss(np.zeros((3, 2)), labels, sel)[0] == pytest.approx(math.log(2), abs=1e-15)


def test_one_positive_three_hardest_of_ten(rng):
    logits = rng.normal(size=(11, 2))
    labels = np.array([1] + [0] * 10)
    ce = per_anchor_ce(logits, labels)
    sel = ohem_select(ce, labels)
    hardest = 1 + np.argsort(-ce[1:])[:3]
    assert set(np.flatnonzero(sel)) == {0, *hardest.tolist()}
    expected = (ce[0] + ce[hardest].sum()) / 4
    assert cls_loss(logits, labels, sel)[0] == pytest.approx(expected, abs=1e-14)


def test_cls_loss_requires_selection():
    with pytest.raises(ValueError):
        cls_loss(np.zeros((2, 2)), np.array([0, 0]), np.zeros(2, dtype=bool))


def test_regression_examples():
    pred = np.zeros((3, 4))
    mask = np.array([True, False, False])
    assert box_loss(pred, pred, mask)[0] == 0.0
    target = pred.copy()
    target[0, 2] = 0.5
    assert box_loss(pred, target, mask)[0] == pytest.approx(0.125, abs=1e-15)
    assert box_loss(pred, target, np.zeros(3, dtype=bool))[0] == 0.0


@given(st.integers(0, 100_000))
def test_regression_matches_resummation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    pred, target = rng.normal(scale=2, size=(n, 10)), rng.normal(scale=2, size=(n, 10))
    mask = rng.random(n) < 0.5
    val = pts_loss(pred, target, mask)[0]
    idx = [i for i in range(n) if mask[i]]
    ref = sum(float(smooth_l1(pred[i, j] - target[i, j])) for i in idx for j in range(10)) / len(idx) if idx else 0.0
    assert val == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_losses_invariant_to_anchor_order(rng):
    n = 12
    perm = rng.permutation(n)
    logits, labels = rng.normal(size=(n, 2)), rng.choice([1, 0, 0], size=n)
    labels[0] = 1
    pred, target, mask = rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), rng.random(n) < 0.5
    plog, ang = rng.normal(size=(n, 3, N_BINS)), rng.uniform(-90, 90, size=(n, 3))
    sel = ohem_select(per_anchor_ce(logits, labels), labels)
    psel = ohem_select(per_anchor_ce(logits[perm], labels[perm]), labels[perm])
    assert cls_loss(logits, labels, sel)[0] == pytest.approx(cls_loss(logits[perm], labels[perm], psel)[0])
    assert box_loss(pred, target, mask)[0] == pytest.approx(box_loss(pred[perm], target[perm], mask[perm])[0])
    assert pose_loss(plog, ang, mask)[0] == pytest.approx(pose_loss(plog[perm], ang[perm], mask[perm])[0])


def test_pose_loss_uniform_logits():
    val = pose_loss(np.zeros((2, 3, N_BINS)), np.zeros((2, 3)), np.ones(2, dtype=bool))[0]
    assert val == pytest.approx(3 * math.log(66), abs=1e-12)
    assert val == pytest.approx(12.569, abs=1e-3)


def test_pose_loss_zero_at_bin_center():
    logits = np.full((1, 3, N_BINS), -1000.0)
    logits[..., 33] = 1000.0
    assert pose_loss(logits, np.full((1, 3), 1.5), np.ones(1, dtype=bool))[0] == 0.0


def test_pose_beta_scales_only_the_squared_term():
    logits = np.full((1, 3, N_BINS), -1000.0)
    logits[..., 33] = 1000.0  # CE 0, expected angle 1.5
    mask = np.ones(1, dtype=bool)
    a = pose_loss(logits, np.full((1, 3), 0.5), mask)[0]  # residual 1 per axis, same bin
    assert a == pytest.approx(3 * 0.001, abs=1e-15)
    assert pose_loss(logits, np.full((1, 3), 0.5), mask, beta=0.002)[0] == pytest.approx(2 * a, abs=1e-15)


def test_pose_loss_quadratic_in_residual():
    # logits tied to bin 33's neighbourhood keep CE fixed while the target moves inside bin 33
    logits = np.zeros((1, 3, N_BINS))
    logits[..., 33] = 50.0
    mask = np.ones(1, dtype=bool)
    l0 = pose_loss(logits, np.full((1, 3), 1.5), mask)
    r1 = pose_loss(logits, np.full((1, 3), 1.0), mask)[0] - l0[0]
    r2 = pose_loss(logits, np.full((1, 3), 0.5), mask)[0] - l0[0]
    assert r2 == pytest.approx(4 * r1, rel=1e-9)


def test_uml_examples():
    L = TaskLosses(1.0, 2.0, 2.0, 4.0)
    assert uml_combine(L, UMLParams(np.zeros(4)))[0] == pytest.approx(5.0, abs=1e-15)
    _, _, d_s = uml_combine(L, UMLParams(np.zeros(4)))
    assert d_s[1] == pytest.approx(-0.75, abs=1e-15)


def test_uml_with_frozen_weights_equals_heuristic_weights():
    p = UMLParams.from_weights(HEURISTIC_WEIGHTS)
    np.testing.assert_allclose(p.coefficients(), HEURISTIC_WEIGHTS, rtol=1e-15)
    const = 0.25 * p.s.sum()
    for L in ([1.0, 2.0, 3.0, 4.0], [0.1, 0.0, 7.0, 0.3]):
        tot, d_l, _ = uml_combine(np.array(L), p)
        ref, w = weighted_combine(np.array(L))
        assert tot - const == pytest.approx(ref, abs=1e-12)
        assert np.max(np.abs(d_l - w)) <= 1e-12


def test_uml_without_positives_keeps_cls_and_regulariser():
    p = UMLParams(np.array([0.3, -0.2, 0.1, 0.4]))
    tot = uml_combine(np.array([0.7, 0.0, 0.0, 0.0]), p)[0]
    assert tot == pytest.approx(math.exp(-0.3) * 0.7 + 0.25 * p.s.sum(), abs=1e-15)


@given(st.lists(st.floats(1e-3, 50.0), min_size=4, max_size=4))
def test_uml_stationary_point_matches_numeric_minimum(losses):
    s_star = uml_stationary_point(losses)
    for k in range(1, 4):
        np.testing.assert_allclose(math.exp(s_star[k]), 2 * losses[k], rtol=1e-12)
    for k in range(4):
        def f(v, k=k):
            s = s_star.copy()
            s[k] = v
            return uml_combine(np.array(losses), UMLParams(s))[0]
        res = minimize_scalar(f, bracket=(s_star[k] - 1, s_star[k] + 1), method="brent", tol=1e-12)
        assert abs(res.x - s_star[k]) < 1e-6


def test_uml_params_reject_nonfinite():
    with pytest.raises(ValueError):
        UMLParams(np.array([0, np.inf, 0, 0]))


@pytest.mark.parametrize("task", ["cls", "box", "pts", "pose"])
@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(task, seed):
    assert max(r.max_rel_error for r in loss_case(seed, task)) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_uml_gradients(seed):
    assert max(r.max_rel_error for r in uml_case(seed)) < 1e-5
