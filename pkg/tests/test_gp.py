import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfusion.cohort import DigitalChannel
from msfusion.gp import (
    GpBounds,
    GpHyperparams,
    complete_trajectory,
    condition,
    fit_gp,
    heuristic_init,
    kernel_matrix,
    kernel_value,
    lml_gradient,
    log_marginal_likelihood,
    posterior,
    sample_trajectory,
)
from msfusion.gp import _kernels as kern

from _oracles import LOG_2PI, brute_kernel, dense_lml, dense_posterior, random_instance

class TestKernel:
    def test_same_index_diagonal(self):
        assert kernel_value(3, 3, True, GpHyperparams(1, 1, 0.1)) == pytest.approx(1.1, abs=1e-15)

    def test_exponent_minus_one(self):
        th = GpHyperparams(1.0, 2.0, 0.3)
        assert kernel_value(0, 2.0 * math.sqrt(2), False, th) == pytest.approx(math.exp(-1), rel=1e-14)

    def test_far_apart_only_noise(self):
        th = GpHyperparams(1.0, 1.0, 0.25)
        assert kernel_value(0, 1e4, True, th) == 0.25
        assert kernel_value(0, 1e4, False, th) == 0.0

    def test_one_point_matrix(self):
        th = GpHyperparams(2.0, 3.0, 0.5)
        np.testing.assert_array_equal(kernel_matrix([4.0], th), [[2.5]])

    def test_delta_on_index_not_time(self):
        th = GpHyperparams(2.0, 3.0, 0.5)
        K = kernel_matrix([0.0, 0.0], th)
        np.testing.assert_allclose(K, [[2.5, 2.0], [2.0, 2.5]], rtol=0, atol=0)

    @pytest.mark.parametrize("impl", [kern._gram_nb, kern._gram_np])
    def test_matches_brute_force(self, impl):
        rng = np.random.default_rng(1)
        times = rng.uniform(0, 84, size=5)
        th = GpHyperparams(1.7, 4.2, 0.03)
        K = impl(times, th.sigma_c2, th.length_scale, th.sigma_n2)
        np.testing.assert_allclose(K, brute_kernel(times, th), rtol=1e-12, atol=0)
        assert np.array_equal(K, K.T)


class TestLml:
    def test_single_zero(self):
        th = GpHyperparams(0.6, 1.0, 0.4)
        assert log_marginal_likelihood([0.0], [0.0], th) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)
        assert -0.5 * LOG_2PI == pytest.approx(-0.918939, abs=1e-6)

    def test_single_two(self):
        th = GpHyperparams(0.6, 1.0, 0.4)
        assert log_marginal_likelihood([5.0], [2.0], th) == pytest.approx(-2.918939, abs=1e-6)

    def test_random_against_dense_inverse(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            times, y, th = random_instance(rng)
            assert abs(log_marginal_likelihood(times, y, th) - dense_lml(times, y, th)) < 1e-8

    @pytest.mark.parametrize("terms", [kern._lml_terms_nb, kern._lml_terms_np])
    def test_gradient_finite_differences(self, terms):
        rng = np.random.default_rng(2)
        for _ in range(10):
            times, y, th = random_instance(rng)
            x = th.as_log()
            _, g, _, _, ok = terms(times, y, x)
            assert ok
            h = 1e-6
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (terms(times, y, x + e)[0] - terms(times, y, x - e)[0]) / (2 * h)
                assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-6)

    def test_fisher_matches_trace_formula(self):
        rng = np.random.default_rng(3)
        times, y, th = random_instance(rng)
        _, _, F, _, _ = kern._lml_terms_nb(times, y, th.as_log())
        K = brute_kernel(times, th)
        Kinv = np.linalg.inv(K)
        D = np.subtract.outer(times, times) ** 2
        Krbf = K - th.sigma_n2 * np.eye(len(times))
        derivs = [Krbf, Krbf * D / th.length_scale**2, th.sigma_n2 * np.eye(len(times))]
        for a in range(3):
            for b in range(3):
                ref = 0.5 * np.trace(Kinv @ derivs[a] @ Kinv @ derivs[b])
                assert F[a, b] == pytest.approx(ref, rel=1e-8, abs=1e-10)

    def test_numba_and_numpy_paths_agree(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            times, y, th = random_instance(rng)
            a = kern._lml_terms_nb(times, y, th.as_log())
            b = kern._lml_terms_np(times, y, th.as_log())
            assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)
            np.testing.assert_allclose(a[1], b[1], rtol=1e-9, atol=1e-10)

    def test_cholesky_reconstructs_jittered_k(self):
        rng = np.random.default_rng(5)
        times, y, th = random_instance(rng)
        fit = condition(times, y, th)
        K = kernel_matrix(times, th) + fit.jitter * np.eye(len(times))
        assert np.max(np.abs(fit.chol @ fit.chol.T - K)) < 1e-8

    def test_jitter_rescues_duplicate_times_without_noise(self):
        th = GpHyperparams(1.0, 5.0, 1e-300)
        fit = condition([1.0, 1.0, 2.0], [0.1, 0.1, 0.2], th)
        assert fit.jitter > 0
        assert np.isfinite(fit.lml)


class TestHeuristics:
    def test_constant_values_floor(self):
        b = heuristic_init(np.arange(10.0), np.full(10, 3.0))
        assert b.initial.sigma_c2 == 1e-6
        assert b.initial.sigma_n2 == 1e-8

    def test_linear_values_noise_floor(self):
        t = np.arange(12.0)
        b = heuristic_init(t, 0.3 * t - 2.0)
        assert b.initial.sigma_n2 == 1e-8

    def test_alternating_variance(self):
        t = np.arange(20.0)
        b = heuristic_init(t, t % 2)
        assert b.initial.sigma_c2 == pytest.approx(0.25, abs=1e-15)

    def test_length_scale_and_bounds(self):
        t = np.array([0.0, 2.0, 4.0, 7.0, 9.0])
        b = heuristic_init(t, np.array([0.0, 1.0, 0.5, 2.0, 1.0]))
        assert b.initial.length_scale == pytest.approx(6.0)
        assert b.lower.length_scale == 0.5
        assert b.upper.length_scale == 84.0
        assert b.lower.sigma_c2 == pytest.approx(0.01 * b.initial.sigma_c2)
        assert b.upper.sigma_n2 == pytest.approx(100 * b.initial.sigma_n2)

    def test_short_series_fallback(self):
        assert heuristic_init([1.0], [2.0]).fallback
        assert heuristic_init([1.0, 2.0], [2.0, 1.0]).fallback


class TestFit:
    def test_recovers_at_least_true_lml(self):
        rng = np.random.default_rng(11)
        truth = GpHyperparams(1.0, 5.0, 0.01)
        t = np.arange(60.0)
        K = kernel_matrix(t, truth)
        y = np.linalg.cholesky(K) @ rng.standard_normal(60)
        b = heuristic_init(t, y)
        fit = fit_gp(t, y, b, restarts=5, seed=0)
        assert fit.lml >= log_marginal_likelihood(t, y, truth) - 1e-6

    def test_single_point(self):
        b = heuristic_init([3.0], [0.7])
        fit = fit_gp([3.0], [0.7], b, restarts=3, seed=1)
        assert fit.lml >= log_marginal_likelihood([3.0], [0.7], b.initial) - 1e-9

    def test_never_below_initial(self):
        rng = np.random.default_rng(12)
        for _ in range(15):
            times, y, _ = random_instance(rng, 30)
            b = heuristic_init(times, y)
            fit = fit_gp(times, y, b, restarts=2, seed=3)
            assert fit.lml >= log_marginal_likelihood(times, y, b.initial) - 1e-9
            lo, hi = b.lower.as_log(), b.upper.as_log()
            assert np.all(fit.theta.as_log() >= lo - 1e-9) and np.all(fit.theta.as_log() <= hi + 1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        times, y, _ = random_instance(rng)
        assert fit_gp(times, y, seed=9) == fit_gp(times, y, seed=9)

    def test_numpy_fallback_optimizer_agrees(self):
        rng = np.random.default_rng(14)
        times, y, _ = random_instance(rng, 25)
        b = heuristic_init(times, y)
        args = (times, y, b.initial.as_log(), b.lower.as_log(), b.upper.as_log(), 200, 1e-6)
        x_nb, f_nb, _, _ = kern.ascent(*args, use_numba=True)
        x_np, f_np, _, _ = kern.ascent(*args, use_numba=False)
        assert f_nb == pytest.approx(f_np, abs=1e-8)

    def test_restart_improves_on_bad_bounds(self):
        t = np.arange(30.0)
        y = np.sin(t / 3.0)
        b = GpBounds(GpHyperparams(1e-3, 0.5, 1e-6), GpHyperparams(10, 84, 1), GpHyperparams(1e-3, 80, 0.9))
        one = fit_gp(t, y, b, restarts=1, seed=0)
        many = fit_gp(t, y, b, restarts=6, seed=0)
        assert many.lml >= one.lml


class TestPosterior:
    def test_far_point_reverts_to_prior(self):
        th = GpHyperparams(2.0, 3.0, 0.1)
        fit = condition([0.0, 1.0, 4.0], [1.0, -0.5, 0.3], th)
        m, v = posterior(fit, 40.0)
        assert abs(m) < 1e-6 * math.sqrt(th.sigma_c2)
        assert v == pytest.approx(th.sigma_c2 + th.sigma_n2, abs=1e-6)

    def test_noise_free_interpolation(self):
        th = GpHyperparams(1.0, 4.0, 1e-12)
        fit = condition([0.0, 5.0, 9.0], [0.4, -1.2, 0.8], th)
        m, _ = posterior(fit, 5.0)
        assert m == pytest.approx(-1.2, abs=1e-5)

    def test_against_dense_inverse(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            times, y, th = random_instance(rng)
            fit = condition(times, y, th)
            ts = rng.uniform(-5, 90)
            m, v = posterior(fit, ts)
            mr, vr = dense_posterior(times, y, th, ts)
            assert abs(m - mr) < 1e-8 and abs(v - vr) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_variance_bounds(self, seed):
        rng = np.random.default_rng(seed)
        times, y, th = random_instance(rng)
        fit = condition(times, y, th)
        _, v = posterior(fit, np.linspace(-10, 95, 50))
        assert np.all(v >= 0) and np.all(v <= th.sigma_c2 + th.sigma_n2 + 1e-8)


class TestSampling:
    def test_monte_carlo_mean_far_point(self):
        th = GpHyperparams(1.0, 2.0, 0.05)
        fit = condition([0.0, 1.0, 2.0], [1.0, 1.2, 0.9], th)
        draws = sample_trajectory(fit, [60.0], seed=0, n_samples=10_000)
        assert abs(draws.mean()) < 3 * math.sqrt(th.sigma_c2 + th.sigma_n2) / 100

    def test_joint_covariance(self):
        th = GpHyperparams(1.0, 10.0, 0.01)
        fit = condition([0.0, 30.0], [0.5, -0.5], th)
        draws = sample_trajectory(fit, [10.0, 11.0], seed=1, n_samples=20_000)
        # neighbouring days are strongly correlated under a joint draw
        assert np.corrcoef(draws.T)[0, 1] > 0.9

    def test_degenerate_fit_matches_mean(self):
        t = np.arange(10.0)
        y = np.full(10, 0.0)
        fit = fit_gp(t, y, heuristic_init(t, y), restarts=3, seed=0)
        draw = sample_trajectory(fit, np.arange(85.0), seed=3)
        mean, _ = posterior(fit, np.arange(85.0))
        assert np.max(np.abs(draw - mean)) < 1e-3

    def test_seeded(self):
        fit = condition([0.0, 3.0], [0.1, 0.2], GpHyperparams(1, 3, 0.1))
        a = sample_trajectory(fit, np.arange(10.0), seed=5)
        b = sample_trajectory(fit, np.arange(10.0), seed=5)
        assert a.tobytes() == b.tobytes()


class TestCompletion:
    def test_fully_observed_is_identity(self):
        rng = np.random.default_rng(0)
        ch = DigitalChannel("pinch_count", np.arange(85), rng.normal(size=85))
        fit = fit_gp(ch.days.astype(float), ch.values, restarts=1)
        out = complete_trajectory(ch, fit, seed=0)
        assert out.tobytes() == ch.values.tobytes()

    def test_single_observation_preserved(self):
        ch = DigitalChannel("pinch_count", [17], [3.25])
        fit = fit_gp([17.0], [3.25], restarts=1)
        out = complete_trajectory(ch, fit, seed=0)
        assert out[17] == 3.25 and out.shape == (85,)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_preservation_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        days = np.sort(rng.choice(85, size=n, replace=False))
        vals = rng.normal(10, 3, size=n)
        ch = DigitalChannel("step_length_med", days, vals)
        mean, std = 10.0, 3.0
        fit = fit_gp(days.astype(float), (vals - mean) / std, restarts=1, seed=seed)
        out = complete_trajectory(ch, fit, seed=seed, scale=(mean, std))
        assert out[days].tobytes() == vals.tobytes()
        assert np.all(np.isfinite(out))

    def test_rejects_foreign_fit(self):
        ch = DigitalChannel("pinch_count", [1, 2, 3], [0.0, 1.0, 0.0])
        fit = fit_gp([1.0, 2.0], [0.0, 1.0], restarts=1)
        with pytest.raises(ValueError):
            complete_trajectory(ch, fit)


def test_lml_gradient_public():
    th = GpHyperparams(1.0, 3.0, 0.2)
    g = lml_gradient([0.0, 1.0, 5.0], [0.2, -0.1, 0.4], th)
    assert g.shape == (3,) and np.all(np.isfinite(g))
