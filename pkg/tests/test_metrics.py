import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crpsd import metrics
from crpsd.imaging import otsu_threshold
from crpsd.metrics import (
    EmptyGroundTruthError,
    adaptive_scores,
    aggregate,
    evaluate_image,
    f_beta,
    mae,
    pr_curve,
    shuffled_auc,
    weighted_f_beta,
)

unit = st.floats(0, 1, allow_nan=False)


def pr_oracle(smap, gt):
    levels = np.floor(smap * 255 + 0.5)
    prec, rec = [], []
    for tau in range(256):
        tp = fp = 0
        for v, g in zip(levels.ravel(), gt.ravel()):
            if v >= tau:
                if g:
                    tp += 1
                else:
                    fp += 1
        prec.append(tp / (tp + fp) if tp + fp else 1.0)
        rec.append(tp / gt.sum())
    return np.array(prec), np.array(rec)


def random_pair(rng, shape=(8, 8)):
    gt = rng.random(shape) < rng.uniform(0.2, 0.7)
    if not gt.any():
        gt.flat[0] = True
    return rng.random(shape), gt


def test_pr_curve_matches_pixel_counting():
    rng = np.random.default_rng(0)
    for _ in range(20):
        smap, gt = random_pair(rng)
        curve = pr_curve(smap, gt)
        p, r = pr_oracle(smap, gt)
        assert np.array_equal(curve.precision, p)
        assert np.array_equal(curve.recall, r)


def test_pr_curve_perfect_and_inverted():
    gt = np.zeros((6, 6), dtype=bool)
    gt[1:4, 2:5] = True
    good = pr_curve(gt.astype(float), gt)
    assert np.all(good.precision[1:] == 1) and np.all(good.recall[1:] == 1)
    bad = pr_curve(1.0 - gt, gt)
    assert np.all(bad.precision[1:] == 0) and np.all(bad.recall[1:] == 0)


def test_pr_curve_monotone_and_bounded():
    rng = np.random.default_rng(1)
    smap, gt = random_pair(rng, (12, 12))
    curve = pr_curve(smap, gt)
    assert len(curve.precision) == 256
    assert np.all(np.diff(curve.recall) <= 0)
    assert np.all((curve.precision >= 0) & (curve.precision <= 1))
    assert curve.recall[0] == 1.0


def test_pr_curve_needs_foreground():
    with pytest.raises(EmptyGroundTruthError):
        pr_curve(np.zeros((3, 3)), np.zeros((3, 3)))


def test_pr_csv():
    curve = pr_curve(np.array([[1.0, 0.0]]), np.array([[1, 0]]))
    lines = curve.to_csv().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert len(lines) == 257
    assert lines[1] == "0,0.5,1.0" and lines[256] == "255,1.0,1.0"


def test_f_beta_closed_form():
    assert f_beta(0.8, 0.5, 0.3) == pytest.approx(0.52 / 0.74, abs=1e-9)
    assert f_beta(1.0, 0.0) == 0.0
    assert f_beta(0.0, 0.0) == 0.0
    assert metrics.BETA_SQ == 0.3


@settings(max_examples=100)
@given(unit)
def test_f_beta_of_equal_inputs(p):
    assert f_beta(p, p) == pytest.approx(p, abs=1e-12)


@settings(max_examples=100)
@given(st.floats(1e-6, 1), st.floats(1e-6, 1))
def test_f_beta_lies_between_inputs(p, r):
    f = f_beta(p, r)
    assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


def test_mae_examples():
    assert mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
    gt = np.array([[1, 0], [0, 1]])
    assert mae(gt, gt) == 0.0
    assert mae(np.array([[1, 0], [0.5, 0.5]]), gt) == 0.25
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mae_matches_direct_summation():
    rng = np.random.default_rng(2)
    for _ in range(200):
        s, g = rng.random((16, 16)), rng.integers(0, 2, (16, 16))
        total = 0.0
        for a, b in zip(s.ravel().tolist(), g.ravel().tolist()):
            total += abs(a - b)
        assert abs(mae(s, g) - total / 256) <= 1e-12
        assert mae(1 - s, 1 - g) == pytest.approx(mae(s, g), abs=1e-12)


def wfb_oracle(smap, gt, beta_sq=1.0):
    """Straight-line weighted F-measure for ground truths with a unique nearest foreground pixel."""
    h, w = gt.shape
    fg = [(y, x) for y in range(h) for x in range(w) if gt[y, x]]
    err = np.abs(smap - gt)
    et = err.copy()
    dist = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if not gt[y, x]:
                d2, (ny, nx) = min(((y - fy) ** 2 + (x - fx) ** 2, (fy, fx)) for fy, fx in fg)
                et[y, x] = err[ny, nx]
                dist[y, x] = math.sqrt(d2)
    kern = [[math.exp(-(dy * dy + dx * dx) / 50.0) for dx in range(-3, 4)] for dy in range(-3, 4)]
    ksum = sum(map(sum, kern))
    ea = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-3, 4):
                for dx in range(-3, 4):
                    if 0 <= y + dy < h and 0 <= x + dx < w:
                        acc += kern[dy + 3][dx + 3] / ksum * et[y + dy, x + dx]
            ea[y, x] = acc
    ew = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if gt[y, x]:
                ew[y, x] = min(err[y, x], ea[y, x])
            else:
                ew[y, x] = err[y, x] * (2 - math.exp(math.log(0.5) / 5 * dist[y, x]))
    tpw = len(fg) - sum(ew[y, x] for y, x in fg)
    fpw = ew[~gt].sum()
    eps = np.finfo(float).eps
    recall = 1 - sum(ew[y, x] for y, x in fg) / len(fg)
    precision = tpw / (eps + tpw + fpw)
    return (1 + beta_sq) * recall * precision / (eps + recall + beta_sq * precision)


def random_rectangle(rng, n=16, margin=0):
    gt = np.zeros((n, n), dtype=bool)
    lo, hi = margin, n - margin
    y0, x0 = rng.integers(lo, hi - 1, size=2)
    y1, x1 = y0 + rng.integers(1, hi - y0 + 1), x0 + rng.integers(1, hi - x0 + 1)
    gt[y0:y1, x0:x1] = True
    return gt


def test_weighted_f_matches_straight_line_formula():
    rng = np.random.default_rng(3)
    for _ in range(10):
        gt = random_rectangle(rng)
        smap = np.clip(gt * rng.uniform(0.3, 1) + rng.random((16, 16)) * rng.uniform(0, 0.7), 0, 1)
        assert weighted_f_beta(smap, gt) == pytest.approx(wfb_oracle(smap, gt), abs=1e-6)


def test_weighted_f_extremes():
    rng = np.random.default_rng(4)
    for _ in range(10):
        gt = random_rectangle(rng)
        assert weighted_f_beta(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-12)
        inner = random_rectangle(rng, margin=3)
        assert weighted_f_beta(1.0 - inner, inner) == pytest.approx(0.0, abs=1e-12)
    near = gt.astype(float)
    near[0, 0] = 1 - near[0, 0]
    assert weighted_f_beta(near, gt) < 1
    with pytest.raises(EmptyGroundTruthError):
        weighted_f_beta(np.zeros((4, 4)), np.zeros((4, 4)))


def test_weighted_f_zero_padding_at_the_border():
    # the smoothing pads with zeros, so foreground errors touching the border
    # are damped and a complemented map keeps a small score
    gt = np.zeros((16, 16), dtype=bool)
    gt[:6, :6] = True
    score = weighted_f_beta(1.0 - gt, gt)
    assert 0 < score < 0.05
    assert score == pytest.approx(wfb_oracle(1.0 - gt, gt), abs=1e-9)


def test_weighted_f_gaussian_window():
    k = metrics.gaussian_window(7, 5)
    assert k.shape == (7, 7) and k.sum() == pytest.approx(1.0)
    assert k[3, 3] / k[3, 0] == pytest.approx(math.exp(9 / 50))


def test_adaptive_scores_extremes():
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:5, 2:6] = True
    assert adaptive_scores(gt.astype(float), gt) == (1.0, 1.0, 1.0)
    p, r, f = adaptive_scores(1.0 - gt, gt)
    assert (p, r, f) == (0.0, 0.0, 0.0)


def test_adaptive_constant_maps_are_one_class():
    gt = np.eye(4, dtype=bool)
    assert adaptive_scores(np.full((4, 4), 0.9), gt) == pytest.approx((0.25, 1.0, f_beta(0.25, 1.0)))
    assert adaptive_scores(np.full((4, 4), 0.1), gt) == (1.0, 0.0, 0.0)


def test_adaptive_scores_compose_otsu_and_counting():
    rng = np.random.default_rng(5)
    for _ in range(20):
        smap, gt = random_pair(rng, (16, 16))
        tau = otsu_threshold(smap)
        p, r = pr_oracle(smap, gt)
        got = adaptive_scores(smap, gt)
        assert got[:2] == (p[tau], r[tau])
        assert got[2] == pytest.approx(f_beta(p[tau], r[tau]), abs=1e-15)


def auc_oracle(pos, neg):
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def test_sauc_matches_pairwise_oracle():
    rng = np.random.default_rng(6)
    for _ in range(30):
        smap = np.round(rng.random((10, 12)), 1)  # coarse values force ties
        fix = np.stack([rng.integers(0, 12, 15), rng.integers(0, 10, 15)], axis=1)
        neg = np.stack([rng.integers(0, 12, 25), rng.integers(0, 10, 25)], axis=1)
        pos_v = [smap[y, x] for x, y in fix]
        neg_v = [smap[y, x] for x, y in neg]
        assert shuffled_auc(smap, fix, neg) == pytest.approx(auc_oracle(pos_v, neg_v), abs=1e-9)


def test_sauc_extremes_and_invariance():
    smap = np.zeros((5, 5))
    smap[2, 2] = 1.0
    assert shuffled_auc(smap, [(2, 2)], [(0, 0), (4, 4)]) == 1.0
    assert shuffled_auc(np.full((5, 5), 0.3), [(1, 1), (2, 2)], [(0, 0)]) == 0.5
    rng = np.random.default_rng(7)
    s = rng.random((9, 9))
    fix = rng.integers(0, 9, (10, 2))
    neg = rng.integers(0, 9, (20, 2))
    base = shuffled_auc(s, fix, neg)
    assert shuffled_auc(np.exp(3 * s) - 4, fix, neg) == base
    assert shuffled_auc(s**0.25, fix, neg) == base
    with pytest.raises(ValueError):
        shuffled_auc(s, np.zeros((0, 2)), neg)
    with pytest.raises(ValueError):
        shuffled_auc(s, [(9, 0)], neg)


def test_aggregate_single_and_pair():
    rng = np.random.default_rng(8)
    a = evaluate_image(*random_pair(rng), name="a")
    one = aggregate([a])
    assert one.scalars() == a.scalars()
    assert np.array_equal(one.precision, a.precision)
    a.mae, b = 0.2, evaluate_image(*random_pair(rng), name="b")
    b.mae = 0.4
    assert aggregate([a, b]).mae == pytest.approx(0.3)
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_matches_summation_oracle():
    rng = np.random.default_rng(9)
    reports = [evaluate_image(*random_pair(rng, (10, 10))) for _ in range(12)]
    agg = aggregate(reports)
    n = len(reports)
    for key in ("mae", "wfb", "adaptive_precision", "adaptive_recall", "adaptive_fb"):
        assert abs(getattr(agg, key) - sum(getattr(r, key) for r in reports) / n) <= 1e-12
    prec = [sum(r.precision[t] for r in reports) / n for t in range(256)]
    rec = [sum(r.recall[t] for r in reports) / n for t in range(256)]
    assert np.allclose(agg.precision, prec, atol=1e-12) and np.allclose(agg.recall, rec, atol=1e-12)
    fb = [f_beta(p, r) for p, r in zip(prec, rec)]
    assert agg.mean_fb == pytest.approx(sum(fb) / 256, abs=1e-12)
    assert agg.max_fb == pytest.approx(max(fb), abs=1e-12)


def test_report_values_are_in_unit_range():
    rng = np.random.default_rng(10)
    for _ in range(10):
        smap, gt = random_pair(rng, (12, 12))
        fix = rng.integers(0, 12, (5, 2))
        rep = evaluate_image(smap, gt, fixations=fix, negatives=rng.integers(0, 12, (7, 2)))
        for key, value in rep.scalars().items():
            assert 0 <= value <= 1, key
        assert "shuffledAuc" in rep.scalars()
