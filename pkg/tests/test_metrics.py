import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthscope.metrics import (MetricReport, delta_threshold, format_table, mean_log10, mean_rel,
                                metric_report, metric_report_per_image, rmse, valid_mask)


def loop_oracle(pred, gt):
    """Plain per-pixel loops, no vectorisation."""
    n = 0
    rel = lg = sq = 0.0
    hits = [0, 0, 0]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        n += 1
        rel += abs(p - g) / g
        lg += abs(math.log10(p) - math.log10(g))
        sq += (p - g) ** 2
        r = max(p / g, g / p)
        for k in range(3):
            if r < 1.25 ** (k + 1):
                hits[k] += 1
    return (rel / n, lg / n, math.sqrt(sq / n)) + tuple(100.0 * h / n for h in hits)


def _close(a, b, rtol=1e-12):
    return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)


def test_against_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        gt = rng.uniform(0.5, 10.0, (16, 16))
        pred = gt * np.exp(rng.normal(0, 0.3, (16, 16)))
        got = (mean_rel(pred, gt), mean_log10(pred, gt), rmse(pred, gt),
               delta_threshold(pred, gt, 1), delta_threshold(pred, gt, 2), delta_threshold(pred, gt, 3))
        want = loop_oracle(pred, gt)
        assert all(_close(a, b) for a, b in zip(got, want)), (got, want)
        assert got[3] <= got[4] <= got[5]


def test_rel_log_rms_examples():
    gt = np.array([2.0, 4.0])
    pred = np.array([3.0, 4.0])
    assert mean_rel(pred, gt) == 0.25
    assert rmse(pred, gt) == pytest.approx(math.sqrt(0.5), rel=1e-15)
    assert mean_log10(np.array([10.0]), np.array([1.0])) == 1.0


def test_delta_examples():
    gt = np.full(10, 2.0)
    assert delta_threshold(1.3 * gt, gt, 1) == 0.0
    assert delta_threshold(1.3 * gt, gt, 2) == 100.0
    assert delta_threshold(2.0 * gt, gt, 3) == 0.0
    assert delta_threshold(gt / 1.3, gt, 1) == 0.0
    # strict comparison at the boundary
    assert delta_threshold(np.array([1.25]), np.array([1.0]), 1) == 0.0


def test_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 5, (8, 8))
    r = metric_report(gt.copy(), gt)
    assert (r.rel, r.log, r.rms) == (0.0, 0.0, 0.0)
    assert (r.delta1, r.delta2, r.delta3) == (100.0, 100.0, 100.0)
    assert r.n == 64


def test_errors():
    with pytest.raises(ValueError):
        mean_rel(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        rmse(np.ones(0), np.ones(0))
    with pytest.raises(ValueError):
        mean_log10(np.array([0.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        metric_report(np.ones((2, 2)), np.zeros((2, 2)))


def test_mask_and_clamp():
    gt = np.array([[1.0, 2.0], [0.0, 12.0]])
    pred = np.array([[-1.0, 2.0], [5.0, 5.0]])
    assert valid_mask(gt).tolist() == [[True, True], [False, False]]
    r = metric_report(pred, gt)
    assert r.n == 2
    # -1 is clamped to 1e-3
    assert r.rel == pytest.approx((1 - 1e-3) / 2, rel=1e-12)


def test_per_image_vs_pooled():
    g1, g2 = np.full((2, 2), 1.0), np.full((1, 2), 2.0)
    p1, p2 = g1 * 1.1, g2
    pooled = metric_report(np.concatenate([p1.ravel(), p2.ravel()]), np.concatenate([g1.ravel(), g2.ravel()]))
    per = metric_report_per_image([p1, p2], [g1, g2])
    assert pooled.rel == pytest.approx(0.4 / 6)
    assert per.rel == pytest.approx(0.05)
    assert per.n == 6


def test_report_serialisation():
    r = metric_report(np.array([1.0, 2.0]), np.array([1.0, 2.5]))
    d = json.loads(r.to_json())
    assert d["schema_version"] == 1 and d["n"] == 2 and "vcs" not in d
    text = format_table([("dsp", r), ("ssn", MetricReport(0.2, 0.1, 0.9, 50, 70, 90, 10))])
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "rel", "log", "rms", "δ1", "δ2", "δ3"]
    assert lines[3].split() == ["ssn", "0.200", "0.100", "0.900", "50.0", "70.0", "90.0"]


depths = arrays(np.float64, 20, elements=st.floats(0.1, 10.0))


@settings(max_examples=60, deadline=None)
@given(depths, depths, st.floats(0.1, 10.0))
def test_scale_invariance(pred, gt, c):
    assert mean_rel(c * pred, c * gt) == pytest.approx(mean_rel(pred, gt), rel=1e-9, abs=1e-12)
    assert mean_log10(c * pred, c * gt) == pytest.approx(mean_log10(pred, gt), rel=1e-9, abs=1e-9)
    assert rmse(c * pred, c * gt) == pytest.approx(c * rmse(pred, gt), rel=1e-9, abs=1e-12)
    for k in (1, 2, 3):
        # ratios can sit on the threshold, so allow one pixel of rounding
        assert abs(delta_threshold(c * pred, c * gt, k) - delta_threshold(pred, gt, k)) <= 5.0


@settings(max_examples=60, deadline=None)
@given(depths, depths)
def test_delta_monotone_and_symmetric(pred, gt):
    d = [delta_threshold(pred, gt, k) for k in (1, 2, 3)]
    assert d[0] <= d[1] <= d[2]
    assert all(0.0 <= v <= 100.0 for v in d)
    assert d == [delta_threshold(gt, pred, k) for k in (1, 2, 3)]
    assert mean_log10(pred, gt) == pytest.approx(mean_log10(gt, pred), abs=1e-12)
