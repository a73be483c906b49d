import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from wgbsl import diagnostics, slcore, wgflow
from wgbsl.gmm import GaussianMixture
from wgbsl.simulators import AlphaStable, GAndK, ToyModel
from wgbsl.wgflow import FlowStep, WGConfig, WGTransform

LOG2PI = np.log(2 * np.pi)


@pytest.fixture(scope="module")
def toy_run():
    c = ToyModel().simulate_summaries(0.0, 3000, np.random.default_rng(21))
    T, trace = wgflow.train(c[:1000], c[1000:2000], WGConfig(epsilon=0.2), np.random.default_rng(22), seed=22)
    return c, T, trace


class TestFlowStep:
    @settings(max_examples=100, deadline=None)
    @given(
        x=hnp.arrays(float, st.tuples(st.integers(1, 20), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False)),
        eps=st.floats(1e-3, 1.0),
    )
    def test_standard_normal_is_stationary(self, x, eps):
        mix = GaussianMixture.standard_normal(x.shape[1])
        assert np.array_equal(wgflow.flow_step(x, mix, eps), x)

    def test_velocity_example(self):
        # mixture N(1, 1): grad log mu(x) = -(x - 1), velocity = -x + x - 1 = -1
        mix = GaussianMixture(np.ones(1), np.ones((1, 1)), np.ones((1, 1, 1)))
        np.testing.assert_allclose(wgflow.velocity(mix, np.array([[0.0], [3.0]])), -1.0)

    def test_bad_step_size(self):
        with pytest.raises(ValueError):
            wgflow.flow_step(np.zeros((2, 1)), GaussianMixture.standard_normal(1), 0.0)
        with pytest.raises(ValueError):
            FlowStep(GaussianMixture.standard_normal(1), -1.0)

    def test_divergence(self):
        mix = GaussianMixture(np.ones(1), np.zeros((1, 1)), np.full((1, 1, 1), 1e-160))
        with pytest.raises(wgflow.FlowDivergedError):
            wgflow.flow_step(np.array([[1.0]]), mix, 0.5, step=3)


class TestLowerBound:
    def test_standard_normal_mixture(self):
        x = np.random.default_rng(0).normal(size=(100, 3))
        lb = wgflow.wg_lower_bound(GaussianMixture.standard_normal(3), x)
        assert lb == pytest.approx(1.5 * LOG2PI, abs=1e-12)

    def test_empty_validation(self):
        with pytest.raises(ValueError, match="empty validation"):
            wgflow.wg_lower_bound(GaussianMixture.standard_normal(1), np.zeros((0, 1)))
        with pytest.raises(ValueError, match="empty validation"):
            wgflow.train(np.zeros((10, 1)), np.zeros((0, 1)))


class TestTrain:
    def test_gaussian_cloud_stops_early(self):
        rng = np.random.default_rng(1)
        cfg = WGConfig()
        x = rng.normal(size=(10_000, 2))
        T, trace = wgflow.train(x[:5000], x[5000:], cfg, rng)
        assert abs(T.metadata["final_lb"] - LOG2PI) < 0.05
        assert len(T.steps) <= cfg.patience + 1

    def test_toy_cloud_gaussianized(self, toy_run):
        c, T, trace = toy_run
        valid = c[1000:2000]
        before = diagnostics.mardia_skewness(valid)
        after = diagnostics.mardia_skewness(T(valid))
        assert after < 0.25 * before
        assert T.metadata["final_lb"] == trace.lower_bounds[len(T.steps)]

    def test_patience_bounds_iterations(self, toy_run):
        _, T, trace = toy_run
        cfg = WGConfig()
        n = len(trace.lower_bounds)
        assert n <= cfg.max_iters
        # kept steps end at the last improvement; the run stops patience iterations later
        kept = len(T.steps)
        assert n == kept + cfg.patience + 1
        sm = np.array(trace.smoothed)
        assert np.all(sm[kept + 1:] <= sm[kept] + cfg.min_delta)

    def test_seed_determinism(self):
        c = ToyModel().simulate_summaries(0.0, 600, np.random.default_rng(2))
        cfg = WGConfig(max_iters=15)
        a, _ = wgflow.train(c[:300], c[300:], cfg, seed=5)
        b, _ = wgflow.train(c[:300], c[300:], cfg, seed=5)
        assert wgflow.dumps(a) == wgflow.dumps(b)


class TestTransform:
    def test_identity(self):
        s = np.array([[1.5, -2.0], [3.0, 4.0]])
        assert np.array_equal(WGTransform.identity(2)(s), s)

    def test_replay_bit_for_bit(self, toy_run):
        c, T, _ = toy_run
        x = T.standardize(c[:5])
        for step in T.steps:
            x = wgflow.flow_step(x, step.mixture, step.epsilon)
        assert np.array_equal(T(c[:5]), x)
        # batched and one-at-a-time evaluation agree
        for i in range(5):
            assert np.array_equal(T(c[i]), x[i])

    def test_round_trip(self, toy_run, tmp_path):
        c, T, _ = toy_run
        path = tmp_path / "t.json"
        T.save(path)
        back = WGTransform.load(path)
        assert np.array_equal(back(c[2000:]), T(c[2000:]))
        assert back.metadata["final_lb"] == T.metadata["final_lb"]

    def test_bad_format(self):
        with pytest.raises(ValueError, match="unsupported"):
            wgflow.loads('{"format": "other"}')

    def test_dimension_mismatch(self, toy_run):
        with pytest.raises(ValueError, match="dimension"):
            toy_run[1](np.zeros(3))

    def test_overflow(self):
        T = WGTransform(np.zeros(1), np.full(1, 1e-308), [])
        with pytest.raises(wgflow.TransformOverflowError, match="transform overflow"):
            T(np.array([1e10]))

    def test_held_out_cloud_less_skewed(self, toy_run):
        c, T, _ = toy_run
        test = c[2000:]
        assert diagnostics.mardia_skewness(T(test)) < diagnostics.mardia_skewness(test)


class TestMoments:
    def test_identity_transform(self):
        s = np.random.default_rng(3).normal(size=(40, 2))
        a = wgflow.wg_moments(WGTransform.identity(2), s)
        b = slcore.sample_moments(s)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)

    def test_map_then_moments(self, toy_run):
        c, T, _ = toy_run
        s = c[2000:2200]
        mapped = np.array([T(v) for v in s])
        mean = mapped.sum(0) / len(mapped)
        diff = mapped - mean
        cov = diff.T @ diff / len(mapped)
        est = wgflow.wg_moments(T, s)
        np.testing.assert_allclose(est.mean, mean, atol=1e-12)
        np.testing.assert_allclose(est.cov, cov, atol=1e-12)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            wgflow.wg_moments(WGTransform.identity(1), np.zeros((1, 1)))


@pytest.mark.parametrize("name", ["toy", "gnk"])
def test_cloud_moments_reduced(name):
    sim = ToyModel() if name == "toy" else GAndK()
    c = sim.simulate_summaries(np.array(sim.theta_true), 3000, np.random.default_rng(31))
    T, _ = wgflow.train(c[:1000], c[1000:2000], WGConfig(), np.random.default_rng(32))
    test, out = c[2000:], T(c[2000:])
    assert diagnostics.mardia_skewness(out) < diagnostics.mardia_skewness(test)
    assert abs(diagnostics.excess_kurtosis(out)) < abs(diagnostics.excess_kurtosis(test))


def test_alpha_stable_cloud_skewness_reduced():
    # at the true parameter the raw excess kurtosis is within sampling noise of 0,
    # so only skewness is compared here
    sim = AlphaStable()
    c = sim.simulate_summaries(np.array(sim.theta_true), 3000, np.random.default_rng(31))
    T, _ = wgflow.train(c[:1000], c[1000:2000], WGConfig(), np.random.default_rng(32))
    assert diagnostics.mardia_skewness(T(c[2000:])) < diagnostics.mardia_skewness(c[2000:])
