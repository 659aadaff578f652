import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adacs.metrics import (
    EmptyMaskError, asd, detection_auc, dice, endpoint_error, evaluate_pair,
    extract_contour, hausdorff, paired_ttest,
)

from oracles import (
    brute_asd, brute_contour, brute_dice, brute_hd, integrated_two_sided_p, textbook_t,
)

masks = st.integers(1, 16).flatmap(
    lambda h: st.integers(1, 16).flatmap(lambda w: st.tuples(
        arrays(np.bool_, (h, w), elements=st.booleans()),
        arrays(np.bool_, (h, w), elements=st.booleans()),
    ))
).filter(lambda ab: ab[0].any() and ab[1].any())


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    with pytest.raises(EmptyMaskError):
        dice(np.zeros((2, 2), bool), np.zeros((2, 2), bool))


def test_contour_examples():
    one = np.zeros((5, 5), bool)
    one[2, 3] = True
    np.testing.assert_array_equal(extract_contour(one), [[2, 3]])
    block = np.zeros((5, 5), bool)
    block[1:4, 1:4] = True
    pts = {tuple(p) for p in extract_contour(block)}
    assert len(pts) == 8 and (2, 2) not in pts
    full = np.ones((4, 6), bool)
    pts = {tuple(p) for p in extract_contour(full)}
    assert pts == {(r, c) for r in range(4) for c in range(6) if r in (0, 3) or c in (0, 5)}
    with pytest.raises(EmptyMaskError):
        extract_contour(np.zeros((3, 3), bool))


def test_distance_examples():
    assert hausdorff([[0, 0]], [[3, 4]]) == 5.0
    assert asd([[0, 0]], [[3, 4]]) == 5.0
    c = extract_contour(np.pad(np.ones((3, 3), bool), 2))
    assert hausdorff(c, c) == 0.0 and asd(c, c) == 0.0
    # a contour against itself shifted by t along rows: every nearest distance is t
    pts = np.array([[0, 0], [0, 1], [0, 2]])
    assert asd(pts, pts + [3, 0]) == 3.0
    with pytest.raises(EmptyMaskError):
        hausdorff(np.zeros((0, 2)), pts)


@given(masks)
def test_metrics_match_brute_force(ab):
    a, b = ab
    ca, cb = extract_contour(a), extract_contour(b)
    assert sorted(map(tuple, ca.tolist())) == sorted(brute_contour(a.tolist()))
    assert dice(a, b) == brute_dice(a.tolist(), b.tolist())
    assert hausdorff(ca, cb) == brute_hd(ca.tolist(), cb.tolist())
    assert asd(ca, cb) == pytest.approx(brute_asd(ca.tolist(), cb.tolist()), rel=1e-15)


@given(masks)
def test_metric_symmetry_and_order(ab):
    a, b = ab
    ca, cb = extract_contour(a), extract_contour(b)
    assert dice(a, b) == dice(b, a)
    assert hausdorff(ca, cb) == hausdorff(cb, ca)
    assert asd(ca, cb) == pytest.approx(asd(cb, ca), rel=1e-15)
    assert hausdorff(ca, cb) >= asd(ca, cb) - 1e-12
    assert (dice(a, b) == 1.0) == bool(np.array_equal(a, b))


def test_endpoint_error_examples(rng):
    gt = rng.normal(size=(2, 5, 5))
    assert endpoint_error(gt, gt) == 0.0
    shifted = gt.copy()
    shifted[0] += 1.0
    assert endpoint_error(shifted, gt) == pytest.approx(1.0)
    est = gt.copy()
    est[:, 0, 0] += [3.0, 4.0]
    est[:, 1, 1] += [0.0, 2.0]
    assert endpoint_error(est, gt) == pytest.approx(7.0 / 25)
    roi = np.zeros((5, 5), bool)
    roi[0, 0] = roi[1, 1] = True
    assert endpoint_error(est, gt, roi) == pytest.approx(3.5)
    with pytest.raises(EmptyMaskError):
        endpoint_error(est, gt, np.zeros((5, 5), bool))


def test_evaluate_pair_identity():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    rep = evaluate_pair(np.zeros((2, 8, 8)), m, m)
    assert (rep.dsc, rep.hd, rep.asd) == (1.0, 0.0, 0.0)
    rep = evaluate_pair(np.zeros((2, 8, 8)), np.zeros((8, 8), bool), m)
    assert rep.dsc == 0.0 and math.isnan(rep.hd)


def test_ttest_worked_example():
    t, p = paired_ttest([0.5, 1.0, 1.5, 2.0], [0, 0, 0, 0])
    assert t == pytest.approx(3.872983346207417, rel=1e-12)
    assert p == pytest.approx(0.030466291662170991, rel=1e-9)


def test_ttest_degenerate_cases(caplog):
    with caplog.at_level("INFO"):
        assert paired_ttest([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
        t, p = paired_ttest([2, 3, 4, 5], [1, 2, 3, 4])
    assert t == math.inf and p == 0.0
    assert len(caplog.records) == 2
    with pytest.raises(ValueError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_ttest([1.0, 2.0], [2.0])


def test_ttest_against_formula_and_integration():
    rng = np.random.default_rng(99)
    for _ in range(50):
        n = int(rng.integers(3, 31))
        x = rng.normal(size=n)
        y = x + rng.normal(0.3, 1.0, size=n)
        t, p = paired_ttest(x, y)
        assert abs(t - textbook_t(x, y)) <= 1e-6 * max(1.0, abs(t))
        assert abs(p - integrated_two_sided_p(t, n - 1)) < 1e-6


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_ttest_swap(x, y):
    t1, p1 = paired_ttest(x, y)
    t2, p2 = paired_ttest(y, x)
    assert t1 == -t2 or (t1 == 0 and t2 == 0)
    assert p1 == pytest.approx(p2, rel=1e-12)
    assert 0.0 <= p1 <= 1.0


def test_detection_auc():
    labels = np.array([0, 0, 1, 1], bool)
    assert detection_auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert detection_auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0
    assert detection_auc([0.5, 0.5, 0.5, 0.5], labels) == 0.5
    assert detection_auc([0.1, 0.4, 0.35, 0.8], labels) == 0.75
    assert math.isnan(detection_auc([0.1, 0.2], np.array([True, True])))
