import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import logsumexp

from wgbsl import slcore
from wgbsl.slcore import (
    GammaPrior,
    adjusted_mean,
    adjusted_variance,
    gamma_log_prior,
    gamma_posterior,
    gaussian_log_density,
    sample_moments,
    synthetic_log_lik,
)

LOG2PI = np.log(2 * np.pi)


def make_est(mean, cov):
    mean = np.asarray(mean, float)
    cov = np.atleast_2d(np.asarray(cov, float))
    chol, logdet, jitter = slcore.factorize(cov)
    return slcore.SyntheticLikelihoodEstimate(mean, cov, chol, logdet, jitter)


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d) * 0.3


def naive_moments(s):
    n, d = s.shape
    mean = [sum(s[j, i] for j in range(n)) / n for i in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((s[j, a] - mean[a]) * (s[j, b] - mean[b]) for j in range(n)) / n
    return np.array(mean), cov


class TestSampleMoments:
    def test_single_sample_is_degenerate(self):
        with pytest.raises(slcore.DegenerateCovarianceError, match="degenerate covariance"):
            sample_moments([[1.0, 2.0]])

    def test_empty(self):
        with pytest.raises(ValueError, match="no summaries"):
            sample_moments(np.zeros((0, 2)))

    def test_two_point(self):
        est = sample_moments([[-1.0], [1.0]])
        assert est.mean.tolist() == [0.0]
        assert est.cov.tolist() == [[1.0]]

    def test_large_normal_sample(self):
        rng = np.random.default_rng(0)
        est = sample_moments(rng.standard_normal((1_000_000, 2)))
        assert np.all(np.abs(est.mean) < 0.01)
        assert np.all(np.abs(est.cov - np.eye(2)) < 0.02)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(40, 3)) * [1.0, 5.0, 0.1] + [3.0, -2.0, 7.0]
        mean, cov = naive_moments(s)
        est = sample_moments(s)
        np.testing.assert_allclose(est.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(est.cov, cov, rtol=1e-12, atol=1e-14)

    def test_factor_invariants(self):
        rng = np.random.default_rng(2)
        est = sample_moments(rng.normal(size=(30, 4)))
        jittered = est.cov + est.jitter * np.eye(4)
        np.testing.assert_allclose(est.chol @ est.chol.T, jittered, rtol=1e-8)
        assert est.logdet == pytest.approx(2 * np.sum(np.log(np.diag(est.chol))))
        np.testing.assert_allclose(est.cov, est.cov.T, rtol=1e-10)

    def test_batched_equals_loop(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(5, 20, 3))
        batch = sample_moments(s)
        for i in range(5):
            one = sample_moments(s[i])
            np.testing.assert_allclose(batch.mean[i], one.mean, rtol=1e-14)
            np.testing.assert_allclose(batch.cov[i], one.cov, rtol=1e-14)

    def test_rank_deficient_gets_jitter(self):
        s = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        est = sample_moments(s)
        assert est.jitter > 0
        assert np.all(np.isfinite(est.chol))


class TestAdjustments:
    def test_examples(self):
        assert adjusted_mean(make_est([5.0], [[4.0]]), [1.0]).tolist() == [7.0]
        est = make_est([0.0, 0.0], np.diag([1.0, 9.0]))
        assert adjusted_mean(est, [2.0, -1.0]).tolist() == [2.0, -3.0]
        assert adjusted_variance(make_est([5.0], [[4.0]]), [1.0]).tolist() == [[8.0]]
        out = adjusted_variance(make_est([0.0, 0.0], np.eye(2)), [1.0, 2.0])
        assert out.tolist() == [[2.0, 0.0], [0.0, 5.0]]

    def test_negative_diagonal(self):
        est = slcore.SyntheticLikelihoodEstimate(np.zeros(1), np.array([[-1.0]]), np.eye(1), 0.0, 0.0)
        with pytest.raises(ValueError, match="invalid covariance"):
            adjusted_mean(est, [1.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 5))
    def test_zero_adjustment_is_identity(self, seed, d):
        rng = np.random.default_rng(seed)
        est = make_est(rng.normal(size=d), random_spd(rng, d))
        assert np.array_equal(adjusted_mean(est, np.zeros(d)), est.mean)
        assert np.array_equal(adjusted_variance(est, np.zeros(d)), est.cov)


class TestGaussianLogDensity:
    def test_examples(self):
        assert gaussian_log_density([0.0], [0.0], [[1.0]], 0.0) == pytest.approx(-0.9189385, abs=1e-7)
        assert gaussian_log_density([1.0, 2.0], [1.0, 2.0], np.eye(2), 0.0) == pytest.approx(-1.8378771, abs=1e-7)

    def test_dense_inverse_oracle(self):
        rng = np.random.default_rng(4)
        cov = random_spd(rng, 3)
        x, m = rng.normal(size=3), rng.normal(size=3)
        diff = x - m
        expected = -1.5 * LOG2PI - 0.5 * np.log(np.linalg.det(cov)) - 0.5 * diff @ np.linalg.inv(cov) @ diff
        chol = np.linalg.cholesky(cov)
        got = gaussian_log_density(x, m, chol, 2 * np.sum(np.log(np.diag(chol))))
        assert got == pytest.approx(expected, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(
        x=hnp.arrays(float, 3, elements=st.integers(-1000, 1000).map(float)),
        m=hnp.arrays(float, 3, elements=st.integers(-1000, 1000).map(float)),
        c=hnp.arrays(float, 3, elements=st.integers(-1000, 1000).map(float)),
    )
    def test_translation_invariance(self, x, m, c):
        chol = np.array([[2.0, 0, 0], [0.5, 1.0, 0], [-1.0, 0.25, 4.0]])
        logdet = 2 * np.sum(np.log(np.diag(chol)))
        assert gaussian_log_density(x + c, m + c, chol, logdet) == gaussian_log_density(x, m, chol, logdet)


class TestGammaPosterior:
    def test_scalar(self):
        post = gamma_posterior(make_est([0.0], [[1.0]]), [2.0], 1.0)
        assert post.cov[0, 0] == pytest.approx(0.5, rel=1e-9)
        assert post.mean[0] == pytest.approx(1.0, rel=1e-9)

    def test_flat_prior_limit(self):
        post = gamma_posterior(make_est([1.0], [[1.0]]), [3.5], 1e6)
        assert post.cov[0, 0] == pytest.approx(1.0, rel=1e-6)
        assert post.mean[0] == pytest.approx(2.5, rel=1e-6)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_grid_quadrature(self, d):
        assert grid_quadrature_error(d, seed=10 + d) < 1e-6


def grid_quadrature_error(d, seed, sigma0=0.7):
    """Max pointwise gap between the closed-form Gamma posterior density and
    prior x rBSL-M likelihood normalized numerically on a grid."""
    rng = np.random.default_rng(seed)
    est = make_est(rng.normal(size=d), random_spd(rng, d))
    s_obs = est.mean + rng.normal(size=d)
    post = gamma_posterior(est, s_obs, sigma0)
    sd = np.sqrt(np.diag(post.cov))
    n = {1: 801, 2: 201, 3: 71}[d]
    axes = [np.linspace(post.mean[i] - 9 * sd[i], post.mean[i] + 9 * sd[i], n) for i in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    cell = np.prod([a[1] - a[0] for a in axes])
    prior = GammaPrior("gaussian", sigma0)
    logu = gamma_log_prior(grid, prior) + np.array(
        [synthetic_log_lik("rBSL-M", est, s_obs, g) for g in grid]
    )
    numeric = np.exp(logu - logsumexp(logu) - np.log(cell))
    chol = np.linalg.cholesky(post.cov)
    closed = np.exp(gaussian_log_density(grid, post.mean, chol, 2 * np.sum(np.log(np.diag(chol)))))
    return float(np.max(np.abs(numeric - closed)))


class TestSyntheticLogLik:
    def test_zero_gamma_matches_bsl(self):
        rng = np.random.default_rng(5)
        est = make_est(rng.normal(size=3), random_spd(rng, 3))
        s = rng.normal(size=3)
        bsl = synthetic_log_lik("BSL", est, s)
        assert synthetic_log_lik("rBSL-M", est, s, np.zeros(3)) == bsl
        assert synthetic_log_lik("rBSL-V", est, s, np.zeros(3)) == bsl

    def test_mean_adjusted_value(self):
        est = make_est([0.0], [[1.0]])
        assert synthetic_log_lik("rBSL-M", est, [1.0], [1.0]) == pytest.approx(-0.9189385, abs=1e-7)

    def test_variance_adjusted_value(self):
        est = make_est([0.0], [[1.0]])
        # variance 1 + 1 * 2^2 = 5
        expected = -0.5 * np.log(2 * np.pi * 5) - 0.5 * 4 / 5
        assert synthetic_log_lik("rBSL-V", est, [2.0], [2.0]) == pytest.approx(expected, rel=1e-9)

    def test_missing_gamma(self):
        with pytest.raises(ValueError):
            synthetic_log_lik("rBSL-M", make_est([0.0], [[1.0]]), [0.0])

    def test_marginal_over_gamma(self):
        # integrating the mean adjustment out under N(0, s0^2) inflates the diagonal
        rng = np.random.default_rng(6)
        est = make_est(rng.normal(size=2), random_spd(rng, 2))
        s = rng.normal(size=2)
        s0 = 0.5
        axes = [np.linspace(-6, 6, 601)] * 2
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
        logu = gamma_log_prior(grid, GammaPrior("gaussian", s0)) + synthetic_log_lik(
            "rBSL-M", est, s, grid
        )
        numeric = logsumexp(logu) + np.log((axes[0][1] - axes[0][0]) ** 2)
        assert slcore.robust_marginal_log_lik(est, s, s0) == pytest.approx(numeric, abs=1e-8)


class TestGammaPrior:
    def test_examples(self):
        assert gamma_log_prior(np.zeros(2), GammaPrior("gaussian", 1.0)) == pytest.approx(-LOG2PI)
        assert gamma_log_prior([0.0], GammaPrior("laplace", 0.5)) == pytest.approx(0.0, abs=1e-15)
        assert gamma_log_prior([2.0], GammaPrior("exponential", 0.5)) == pytest.approx(-1.6931472, abs=1e-7)

    def test_exponential_support(self):
        assert gamma_log_prior([1.0, -0.1], GammaPrior("exponential", 0.5)) == -np.inf

    def test_sum_of_components(self):
        for kind, g in itertools.product(("gaussian", "laplace", "exponential"), ([0.3, 1.2], [2.0, 0.1])):
            prior = GammaPrior(kind, 0.5)
            total = gamma_log_prior(np.array(g), prior)
            parts = sum(gamma_log_prior(np.array([x]), prior) for x in g)
            assert total == pytest.approx(parts)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            GammaPrior("cauchy", 1.0)
