import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from corrflow.metrics import (
    PckScore,
    boundary,
    contour_f,
    davis_aggregate,
    default_tolerance,
    pck_instance,
    pck_max,
    pck_scores,
    region_j,
    score_sequence,
)

masks = arrays(np.uint8, (12, 12), elements=st.integers(0, 1))


def _square(y, x, size=10, extent=40):
    m = np.zeros((extent, extent), dtype=np.uint8)
    m[y : y + size, x : x + size] = 1
    return m


# -- J ------------------------------------------------------------------------------


def test_j_identical_is_one():
    m = _square(5, 5)
    assert region_j(m, m, 1) == 1.0


def test_j_one_third():
    pred = np.zeros((1, 3), dtype=np.uint8)
    gt = np.zeros((1, 3), dtype=np.uint8)
    pred[0, :2] = 1
    gt[0, 1:] = 1
    assert region_j(pred, gt, 1) == pytest.approx(1 / 3)


def test_j_disjoint_is_zero():
    assert region_j(_square(0, 0), _square(20, 20), 1) == 0.0


def test_j_both_empty_is_one():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert region_j(z, z, 1) == 1.0


def test_j_extent_mismatch():
    with pytest.raises(ValueError):
        region_j(np.zeros((3, 3)), np.zeros((3, 4)), 1)


@given(masks, masks)
def test_j_symmetric_and_bounded(a, b):
    j = region_j(a, b, 1)
    assert j == region_j(b, a, 1) and 0 <= j <= 1


@given(masks, masks, st.integers(0, 6), st.integers(0, 6))
def test_j_translation_invariant(a, b, dy, dx):
    pa = np.zeros((24, 24), dtype=np.uint8)
    pb = np.zeros((24, 24), dtype=np.uint8)
    pa[dy : dy + 12, dx : dx + 12] = a
    pb[dy : dy + 12, dx : dx + 12] = b
    assert region_j(pa, pb, 1) == region_j(a, b, 1)


# -- F ------------------------------------------------------------------------------


def test_boundary_of_square_is_its_ring():
    b = boundary(_square(5, 5, 4, 20))
    assert b.sum() == 12
    assert not b[6:8, 6:8].any()


def test_f_identical_is_one():
    m = _square(5, 5)
    assert contour_f(m, m, 1, 2) == 1.0


def test_f_one_pixel_shift_within_tolerance():
    assert contour_f(_square(5, 6), _square(5, 5), 1, 1) == 1.0


def test_f_far_shift_is_zero():
    assert contour_f(_square(0, 0), _square(25, 25), 1, 2) == 0.0


def test_f_empty_conventions():
    z = np.zeros((10, 10), dtype=np.uint8)
    assert contour_f(z, z, 1, 1) == 1.0
    assert contour_f(z, _square(2, 2, 4, 10), 1, 1) == 0.0


def test_default_tolerance_480p():
    assert default_tolerance(480, 854) == math.ceil(0.008 * math.hypot(480, 854)) == 8


@settings(max_examples=50)
@given(masks, masks)
def test_f_symmetric(a, b):
    assert contour_f(a, b, 1, 1) == pytest.approx(contour_f(b, a, 1, 1))


@settings(max_examples=50)
@given(masks, masks)
def test_f_non_decreasing_in_tolerance(a, b):
    vals = [contour_f(a, b, 1, t) for t in range(5)]
    assert all(x <= y + 1e-12 for x, y in zip(vals, vals[1:]))


# -- aggregation ----------------------------------------------------------------------


def test_aggregate_reproduces_headline_jf():
    score = davis_aggregate([np.full(20, 0.477)], [np.full(20, 0.513)])
    assert score.jf_mean == pytest.approx(0.495, abs=1e-12)
    assert score.j_recall == 0.0 and score.f_recall == 1.0


def test_aggregate_skips_first_frame_and_averages_objects():
    j = [np.array([0.0, 1.0, 1.0]), np.array([0.0, 0.6, 0.2])]
    score = davis_aggregate(j, j)
    assert score.j_mean == pytest.approx((1.0 + 0.4) / 2)
    assert score.j_recall == pytest.approx((1.0 + 0.5) / 2)


def test_single_object_equals_its_mean():
    vals = np.array([1.0, 0.3, 0.9, 0.6])
    assert davis_aggregate([vals], [vals]).j_mean == pytest.approx(vals[1:].mean())


def test_aggregate_rejects_no_scored_frames():
    with pytest.raises(ValueError):
        davis_aggregate([np.array([1.0])], [np.array([1.0])])


def test_score_sequence_perfect():
    gts = np.stack([_square(2, 2), _square(4, 4)])
    J, F = score_sequence(gts, gts)
    s = davis_aggregate(J, F)
    assert (s.j_mean, s.f_mean, s.j_recall, s.f_recall) == (1.0, 1.0, 1.0, 1.0)
    assert "J&F-Mean" in s.table()


# -- PCK ------------------------------------------------------------------------------------


def test_pck_exact_hits():
    gt = np.array([[0.0, 0.0], [10.0, 0.0]])
    for a in (1e-6, 0.1, 0.5):
        assert pck_instance(gt, gt, a) == 1.0


def test_pck_instance_half():
    gt = np.array([[0.0, 0.0], [30.0, 40.0]])  # diagonal 50
    pred = gt.copy()
    pred[1, 0] += 0.15 * 50
    assert pck_instance(pred, gt, 0.1) == 0.5
    assert pck_instance(pred, gt, 0.2) == 1.0


def test_pck_instance_strict_at_threshold():
    gt = np.array([[0.0, 0.0], [30.0, 40.0]])
    pred = gt.copy()
    pred[1, 0] += 5.0  # normalized distance exactly 0.1
    assert pck_instance(pred, gt, 0.1) == 0.5
    assert pck_instance(pred, gt, 0.1, strict=False) == 1.0


def test_pck_instance_no_visible_is_absent():
    gt = np.array([[1.0, 2.0, 0], [3.0, 4.0, 0]])
    assert pck_instance(gt[:, :2], gt, 0.1) is None


def test_pck_infinite_alpha_accepts_degenerate_instance():
    gt = np.zeros((2, 2))  # zero-size box, every miss has infinite normalized distance
    assert pck_instance(gt + 1, gt, math.inf) == 1.0


def test_pck_max_inclusive():
    gt = np.array([[10.0, 10.0]])
    assert pck_max(gt + [4.0, 0.0], gt, 0.1, 40, 40) == 1.0
    assert pck_max(gt + [4.01, 0.0], gt, 0.1, 40, 40) == 0.0


def test_pck_max_alpha_zero_exact_only():
    gt = np.array([[10.0, 10.0], [5.0, 5.0]])
    pred = gt + [[0.0, 0.0], [0.001, 0.0]]
    assert pck_max(pred, gt, 0.0, 40, 40) == 0.5


def test_pck_max_rejects_bad_bbox():
    with pytest.raises(ValueError):
        pck_max(np.zeros((1, 2)), np.zeros((1, 2)), 0.1, 0, 5)


@settings(max_examples=50)
@given(
    arrays(np.float64, (5, 2), elements=st.floats(0, 100)),
    arrays(np.float64, (5, 2), elements=st.floats(-20, 20)),
)
def test_pck_monotone_in_alpha_and_one_at_infinity(gt, noise):
    pred = gt + noise
    alphas = [0.05, 0.1, 0.2, 0.5]
    for fn in (lambda a: pck_instance(pred, gt, a), lambda a: pck_max(pred, gt, a, 30, 20)):
        vals = [fn(a) for a in alphas]
        assert all(x <= y for x, y in zip(vals, vals[1:]))
        assert fn(math.inf) == 1.0


def test_pck_table_has_both_thresholds():
    gt = np.array([[0.0, 0.0, 1], [30.0, 40.0, 1]])
    s = pck_scores(gt[:, :2], gt)
    assert isinstance(s, PckScore)
    table = s.table()
    assert "@.1" in table and "@.2" in table and "PCK_instance" in table and "PCK_max" in table
