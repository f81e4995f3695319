import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from parcelqc.gmm_threshold import (
    Z90,
    DegenerateScoresError,
    GmmFit,
    classify_scores,
    fit_gmm2,
    histogram,
    rejection_threshold,
)
from parcelqc.synth_qc import QcScoreSet


def cohort_scale_sample(seed=2024, n=3577):
    rng = np.random.default_rng(seed)
    low = rng.random(n) < 0.10
    x = np.where(low, rng.normal(0.40, 0.05, n), rng.normal(0.80, 0.03, n))
    return x, low


def test_z90_against_quantile_oracle():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    z = mpmath.sqrt(2) * mpmath.erfinv(mpmath.mpf("0.8"))
    assert abs(float(z) - Z90) < 1e-15
    assert abs(norm.ppf(0.9) - Z90) < 1e-15


def test_threshold_example():
    fit = GmmFit((0.1, 0.9), (0.40, 0.80), (0.05, 0.03), 0.0, 1, 0.0)
    assert rejection_threshold(fit) == pytest.approx(0.46407757827723, abs=1e-14)


def test_threshold_with_flipped_components():
    a = GmmFit((0.1, 0.9), (0.40, 0.80), (0.05, 0.03), 0.0, 1, 0.0)
    b = GmmFit((0.9, 0.1), (0.80, 0.40), (0.03, 0.05), 0.0, 1, 0.0)
    assert rejection_threshold(a) == rejection_threshold(b)


def test_recovery_cohort_scale():
    x, _ = cohort_scale_sample()
    fit = fit_gmm2(x)
    assert abs(fit.mu[0] - 0.40) <= 0.01 and abs(fit.mu[1] - 0.80) <= 0.01
    assert abs(fit.phi[0] - 0.10) <= 0.02 and abs(fit.phi[1] - 0.90) <= 0.02
    assert abs(fit.threshold - (0.40 + Z90 * 0.05)) <= 0.02
    assert fit.threshold == rejection_threshold(fit)
    assert fit.converged
    assert abs(sum(fit.phi) - 1.0) <= 1e-12


def test_log_likelihood_monotone():
    x, _ = cohort_scale_sample(seed=7)
    fit = fit_gmm2(x)
    h = np.array(fit.ll_history)
    assert len(h) == fit.iterations + 1
    steps = np.diff(h)
    assert np.all(steps >= -1e-9 * np.maximum(1.0, np.abs(h[1:])))


def test_all_equal_is_degenerate():
    with pytest.raises(DegenerateScoresError, match="degenerate: zero variance"):
        fit_gmm2([0.9] * 20)


def test_too_few_scores():
    with pytest.raises(ValueError, match="at least 8"):
        fit_gmm2([0.1, 0.2, 0.3])


def test_point_masses_collapse_to_floor():
    x = np.array([0.3] * 10 + [0.9] * 10)
    fit = fit_gmm2(x)
    assert fit.mu == pytest.approx((0.3, 0.9), abs=1e-12)
    assert fit.phi == pytest.approx((0.5, 0.5), abs=1e-12)
    floor = 1e-6 * 0.6
    assert fit.sigma_floor == pytest.approx(floor)
    assert fit.sigma == pytest.approx((floor, floor), rel=1e-9)
    assert fit.threshold == pytest.approx(0.3, abs=1e-5)


def test_mostly_identical_scores_still_split():
    x = np.array([0.95] * 90 + list(np.linspace(0.3, 0.5, 10)))
    fit = fit_gmm2(x)
    assert fit.mu[0] < 0.6 < fit.mu[1]


def test_accepts_score_set_and_skips_failures():
    x, _ = cohort_scale_sample(n=200)
    ids = [f"s{i}" for i in range(len(x))]
    s = QcScoreSet.from_scores(ids, x)
    assert fit_gmm2(s) == fit_gmm2(x)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    x, _ = cohort_scale_sample(seed=seed % 1000, n=400)
    a = fit_gmm2(x)
    b = fit_gmm2(np.random.default_rng(seed).permutation(x))
    for p, q in [(a.mu, b.mu), (a.sigma, b.sigma), (a.phi, b.phi)]:
        assert np.allclose(p, q, rtol=0, atol=1e-6)


@settings(max_examples=10)
@given(st.integers(0, 999), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_affine_equivariance(seed, a, b):
    x, _ = cohort_scale_sample(seed=seed, n=400)
    f0 = fit_gmm2(x)
    f1 = fit_gmm2(a * x + b)
    assert np.allclose(f1.mu, a * np.array(f0.mu) + b, rtol=0, atol=1e-6)
    assert np.allclose(f1.sigma, a * np.array(f0.sigma), rtol=0, atol=1e-6)
    assert abs(f1.threshold - (a * f0.threshold + b)) <= 1e-6
    ids = [str(i) for i in range(x.size)]
    c0 = classify_scores(QcScoreSet.from_scores(ids, x), f0.threshold)
    c1 = classify_scores(QcScoreSet.from_scores(ids, a * x + b), f1.threshold)
    # scores sitting within round-off of the threshold may legitimately flip
    margin = np.abs(x - f0.threshold) > 1e-6
    assert [p for (_, p), m in zip(c0, margin) if m] == [p for (_, p), m in zip(c1, margin) if m]


def test_rejected_component_agreement():
    x, low = cohort_scale_sample()
    fit = fit_gmm2(x)
    rejected = x <= fit.threshold
    # at least 95% of the rejected subjects come from the low component
    assert low[rejected].mean() >= 0.95


def test_classify():
    s = QcScoreSet.from_scores(["a", "b", "c"], [0.470, 0.464, 0.2])
    assert classify_scores(s, 0.464) == [("a", True), ("b", False), ("c", False)]
    assert classify_scores(QcScoreSet(), 0.5) == []


def test_histogram_bins():
    x = np.array([0.40, 0.405, 0.52, 0.9])
    rows = histogram(x, 0.05)
    assert len(rows) == math.ceil((0.9 - 0.40) / 0.05)
    assert sum(c for _, c in rows) == 4
    assert rows[0] == (0.40, 2)
    assert rows[-1][1] == 1
    assert histogram([0.5] * 3, 0.01) == [(0.5, 3)]


def test_json_payload():
    x, _ = cohort_scale_sample(n=300)
    d = fit_gmm2(x).to_json()
    assert set(d) >= {"phi", "mu", "sigma", "threshold", "iterations", "log_likelihood"}
    assert len(d["phi"]) == 2
