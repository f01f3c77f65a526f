"""Tests for the statistics kit."""

import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from cimbnn.stats import (
    DegenerateInput,
    EmptyRetention,
    InvalidArgument,
    accuracy_recovery,
    calibration_csv,
    default_thresholds,
    ece,
    entropy_rows,
    histogram_csv,
    normal_order_medians,
    predictive_entropy,
    qq_csv,
    qq_rvalue,
    recovery_curve,
    summarize,
)

prob_vectors = arrays(float, st.integers(2, 8), elements=st.floats(0.0, 1.0)).filter(
    lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


class TestSummarize:
    def test_values(self):
        s = summarize([1.0, 2.0, 3.0, 4.0])
        assert (s.n, s.mean, s.min, s.max) == (4, 2.5, 1.0, 4.0)
        assert s.sd == pytest.approx(np.std([1, 2, 3, 4], ddof=1))

    def test_single_sample(self):
        s = summarize([7.0])
        assert s.sd == 0.0 and s.mean == 7.0

    def test_empty(self):
        with pytest.raises(DegenerateInput):
            summarize([])


class TestQQ:
    def test_blom_positions(self):
        n = 10
        p = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
        np.testing.assert_allclose(normal_order_medians(n), sps.norm.ppf(p), rtol=1e-12)

    def test_exact_quantiles(self):
        assert qq_rvalue(normal_order_medians(500)) == pytest.approx(1.0, abs=1e-12)

    def test_normal_samples(self):
        x = np.random.default_rng(0).standard_normal(2500)
        assert qq_rvalue(x) >= 0.996

    def test_uniform_samples(self):
        x = np.random.default_rng(0).uniform(size=2500)
        assert qq_rvalue(x) < 0.99

    @given(a=st.floats(-1e3, 1e3), b=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_affine_invariance(self, a, b, seed):
        x = np.random.default_rng(seed).standard_normal(50)
        assert qq_rvalue(a + b * x) == pytest.approx(qq_rvalue(x), abs=1e-9)

    def test_result_in_range(self):
        x = np.random.default_rng(1).exponential(size=200)
        assert -1.0 <= qq_rvalue(x) <= 1.0

    def test_zero_variance(self):
        with pytest.raises(DegenerateInput):
            qq_rvalue(np.ones(10))

    @pytest.mark.parametrize("bad", [[1.0, 2.0], [1.0, 2.0, math.nan]])
    def test_invalid(self, bad):
        with pytest.raises(InvalidArgument):
            qq_rvalue(bad)


class TestPredictiveEntropy:
    def test_uniform_two_classes(self):
        assert predictive_entropy([0.5, 0.5]) == pytest.approx(0.6931, abs=1e-4)

    def test_one_hot(self):
        assert predictive_entropy([0.0, 1.0, 0.0]) == 0.0

    def test_hand_value(self):
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert predictive_entropy([0.9, 0.1]) == pytest.approx(expected, rel=1e-12)
        assert predictive_entropy([0.9, 0.1]) == pytest.approx(0.3251, abs=1e-4)

    @given(p=prob_vectors)
    def test_bounded_by_uniform(self, p):
        h = predictive_entropy(p)
        k = p.size
        assert 0.0 <= h <= math.log(k)
        if h >= math.log(k) - 1e-9:
            # only the uniform vector reaches the maximum
            np.testing.assert_allclose(p, 1.0 / k, atol=1e-3)

    @pytest.mark.parametrize("bad", [[0.6, 0.6], [-0.1, 1.1], []])
    def test_invalid(self, bad):
        with pytest.raises(InvalidArgument):
            predictive_entropy(bad)

    def test_rows_match_scalar(self):
        p = np.array([[0.9, 0.1], [0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_allclose(entropy_rows(p), [predictive_entropy(r) for r in p])


class TestECE:
    def test_perfect(self):
        assert ece(np.ones(20), np.ones(20, bool)).ece == 0.0

    def test_hand_value(self):
        correct = np.array([1] * 6 + [0] * 4, bool)
        r = ece(np.full(10, 0.8), correct, n_bins=1)
        assert r.ece == pytest.approx(0.2, abs=1e-12)
        assert r.ece_percent == pytest.approx(20.0)

    def test_bin_count_irrelevant_within_shared_bin(self):
        # [0.81, 0.86) lies inside one bin for both 10 and 15 bins
        conf = np.random.default_rng(0).uniform(0.81, 0.86, size=100)
        correct = np.random.default_rng(1).uniform(size=100) < 0.7
        assert ece(conf, correct, 10).ece == pytest.approx(ece(conf, correct, 15).ece, abs=1e-12)

    @given(seed=st.integers(0, 10_000), n_bins=st.integers(1, 20))
    def test_report_invariants(self, seed, n_bins):
        g = np.random.default_rng(seed)
        conf = g.uniform(size=64)
        r = ece(conf, g.uniform(size=64) < conf, n_bins)
        assert sum(b.weight for b in r.bins) == pytest.approx(1.0, abs=1e-9)
        assert all(0.0 <= b.accuracy <= 1.0 for b in r.bins)
        assert 0.0 <= r.ece <= 1.0

    def test_zero_when_accuracy_matches_confidence(self):
        # bins of 4 predictions at 0.25, 0.5, 0.75 with matching hit rates
        conf = np.repeat([0.25, 0.5, 0.75], 4)
        correct = np.array([1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0], bool)
        assert ece(conf, correct, n_bins=4).ece == pytest.approx(0.0, abs=1e-12)

    def test_confidence_one_counted(self):
        r = ece([1.0], [True], n_bins=15)
        assert r.bins[-1].count == 1

    def test_zero_bins(self):
        with pytest.raises(InvalidArgument):
            ece([0.5], [True], n_bins=0)


class TestAccuracyRecovery:
    H = np.array([0.1] * 8 + [0.9] * 2)
    OK = np.array([True] * 8 + [False] * 2)

    def test_infinite_threshold(self):
        assert accuracy_recovery(self.H, self.OK, math.inf) == (1.0, 0.0)

    def test_all_correct(self):
        for t in (0.05, 0.5, 1.0):
            try:
                assert accuracy_recovery(self.H, np.ones(10, bool), t).accuracy_delta == 0.0
            except EmptyRetention:
                pass

    def test_constructed_example(self):
        r = accuracy_recovery(self.H, self.OK, 0.5)
        assert r.retained_fraction == pytest.approx(0.8)
        assert r.accuracy_delta == pytest.approx(0.2)

    def test_empty_retention(self):
        with pytest.raises(EmptyRetention):
            accuracy_recovery(self.H, self.OK, 0.05)

    def test_monotone_in_threshold(self):
        deltas = [row[2] for row in recovery_curve(self.H, self.OK, [1.0, 0.9, 0.5, 0.2, 0.1])]
        assert all(b >= a for a, b in zip(deltas, deltas[1:]))

    def test_curve_nan_on_empty(self):
        rows = recovery_curve(self.H, self.OK, [0.0, 0.5])
        assert math.isnan(rows[0][2]) and rows[0][1] == 0.0
        assert rows[1][2] == pytest.approx(0.2)

    def test_default_grid(self):
        g = default_thresholds()
        assert g[0] == 0.0 and g[-1] == 0.6 and len(g) == 13

    def test_negative_entropy(self):
        with pytest.raises(InvalidArgument):
            accuracy_recovery([-0.1], [True], 0.5)


class TestCsv:
    def _rows(self, text):
        return list(csv.reader(io.StringIO(text)))

    def test_qq_columns(self):
        rows = self._rows(qq_csv([3.0, 1.0, 2.0]))
        assert rows[0] == ["index", "sample_quantile", "theoretical_quantile"]
        assert [float(r[1]) for r in rows[1:]] == [1.0, 2.0, 3.0]
        assert float(rows[2][2]) == 0.0

    def test_histogram_counts(self):
        rows = self._rows(histogram_csv(np.arange(100.0), bins=4))
        assert sum(int(r[2]) for r in rows[1:]) == 100

    def test_calibration_rows(self):
        rows = self._rows(calibration_csv(ece([0.8] * 10, [True] * 8 + [False] * 2, 5)))
        assert len(rows) == 6
