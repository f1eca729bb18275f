import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfusion.features import (
    SelectionSpec,
    WindowSpec,
    _window_stats_nb,
    _window_stats_np,
    anova_f,
    rfe,
    select_features,
    select_k_best,
    window_stats,
    windowed_features,
)
from msfusion.table import FeatureTable

from _oracles import direct_f


def window_oracle(x, window, stride):
    out = []
    for s in range(0, len(x) - window + 1, stride):
        seg = np.asarray(x[s:s + window], dtype=float)
        t = np.arange(window, dtype=float)
        slope, intercept = np.polyfit(t, seg, 1)
        out.append([seg.mean(), seg.var(), slope, intercept])
    return np.array(out)


class TestAnova:
    def test_hand_example(self):
        # groups {1, 3} and {2, 4}: means 2 and 3, grand mean 2.5
        # SSB = 2*0.25 + 2*0.25 = 1, SSW = 2 + 2 = 4, F = 1 / (4 / 2) = 0.5
        F = anova_f(np.array([[1.0], [3.0], [2.0], [4.0]]), [1, 1, 0, 0])
        assert F[0] == pytest.approx(0.5, abs=1e-15)

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, d = int(rng.integers(4, 60)), int(rng.integers(1, 8))
            X = rng.normal(rng.uniform(-100, 100), rng.uniform(0.1, 10), size=(n, d))
            y = rng.random(n) < 0.4
            y[:2] = [True, False]
            F = anova_f(X, y)
            for j in range(d):
                ref = direct_f(X[:, j], y)
                assert abs(F[j] - ref) <= 1e-9 * max(1.0, abs(ref))

    def test_constant_column(self):
        X = np.c_[np.full(6, 2.0), np.arange(6.0)]
        F = anova_f(X, [1, 1, 1, 0, 0, 0])
        assert F[0] == 0.0 and F[1] > 0

    def test_perfect_separation_without_spread(self):
        F = anova_f(np.array([[1.0], [1.0], [0.0], [0.0]]), [1, 1, 0, 0])
        assert F[0] == np.inf

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            anova_f(np.ones((4, 1)), [1, 1, 1, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(30, 3))
        y = rng.random(30) < 0.5
        y[:2] = [True, False]
        a, b = rng.uniform(0.5, 5.0), rng.uniform(-50, 50)
        np.testing.assert_allclose(anova_f(a * X + b, y), anova_f(X, y), rtol=1e-8)

    def test_select_k_best_tie_prefers_earlier(self):
        x = np.array([0.0, 1.0, 0.2, 1.1, 0.1, 0.9])
        X = np.c_[x, x, np.zeros(6)]
        assert select_k_best(X, [0, 1, 0, 1, 0, 1], 1) == [0]


class TestRfe:
    def test_recovers_planted_column(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(120, 6))
            y = X[:, 4] + 0.3 * rng.normal(size=120) > 0
            hits += rfe(X, y, keep=1) == [4]
        assert hits >= 19

    def test_duplicate_columns_lower_index_survives_tie(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=80)
        y = x + 0.5 * rng.normal(size=80) > 0
        # equal weights; the lower index is removed first
        assert rfe(np.c_[x, x], y, keep=1) == [1]

    def test_keep_all_is_identity(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 3))
        y = rng.random(40) < 0.5
        assert rfe(X, y, keep=3) == [0, 1, 2]

    def test_bad_keep(self):
        with pytest.raises(ValueError):
            rfe(np.ones((10, 2)), np.arange(10) % 2, keep=3)

    def test_select_features_by_name(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(100, 5))
        y = X[:, 2] > 0
        table = FeatureTable(X, [f"c{i}" for i in range(5)], [f"r{i}" for i in range(100)])
        assert select_features(table, y, SelectionSpec(anova_k=3, rfe_keep=1)) == ["c2"]


class TestWindows:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=85)
        ref = window_oracle(x, 28, 28)
        for impl in (_window_stats_np, _window_stats_nb):
            out = impl(x[None, :], 28, 28)[0]
            np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)

    def test_linear_trajectory(self):
        x = 2.0 + 0.5 * np.arange(85)
        names, vals = windowed_features(x, WindowSpec(28, 28, ("slope", "intercept")))
        assert names[:2] == ["series__w0__slope", "series__w0__intercept"]
        np.testing.assert_allclose(vals[0::2], 0.5, rtol=1e-12)
        np.testing.assert_allclose(vals[1::2], [2.0, 16.0, 30.0], rtol=1e-12)

    def test_window_count(self):
        assert WindowSpec(28, 28).n_windows() == 3
        assert WindowSpec(7, 7).n_windows() == 12

    def test_window_longer_than_series_warns(self):
        with pytest.warns(UserWarning):
            out = window_stats(np.arange(10.0), 20, 5)
        assert out.shape == (1, 1, 4)

    def test_slope_needs_two_points(self):
        with pytest.raises(ValueError):
            WindowSpec(1, 1, ("slope",))

    def test_backends_agree(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(20, 85))
        np.testing.assert_allclose(window_stats(X, 14, 7, use_numba=True), window_stats(X, 14, 7, use_numba=False),
                                   rtol=1e-10, atol=1e-12)
