"""Acceptance criteria. Each test prints one PASS/FAIL line; the lines are
repeated in the terminal summary. Experiments 1 and 9 run the shipped configs
end to end and take a long time on one core."""
import json
from pathlib import Path

import numpy as np
import pytest

from test_simulators import TOAD_EXPECTED, TOAD_MATRIX, gnk_octile_check, stable_normal_check
from test_slcore import grid_quadrature_error
from test_vb import analytic_lb_gradient, gaussian_oracle, random_params
from wgbsl import diagnostics, gmm, harness, simulators, vb, wgflow
from wgbsl.gmm import GaussianMixture
from wgbsl.seeding import stream
from wgbsl.simulators import GAndK, ToyModel
from wgbsl.vb import VariationalParams
from wgbsl.wgflow import WGConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOY_LB_TARGET = np.log(2 * np.pi)  # (d/2) log 2 pi with d = 2, about 1.8379


def verdict(record, number, ok, detail):
    record(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    return ok


def mean_mse(results, label):
    vals = [r.mse for r in results if r.method == label and r.ok]
    return float(np.mean(vals)) if vals else np.nan, vals


def run_config(name, out, methods):
    data = json.loads((CONFIGS / f"{name}.json").read_text())
    data["methods"] = methods
    data["output"] = str(out)
    return harness.replicate_and_report(harness.config_from_dict(data), workers=1)


# ------------------------------------------------------------------ 1

@pytest.mark.slow
def test_toy_reproduction(acceptance, tmp_path):
    res = run_config("toy", tmp_path, ["VB-BSL", "VB-rBSL-WG"])
    wg, wg_vals = mean_mse(res["results"], "VB-rBSL-WG")
    bsl, _ = mean_mse(res["results"], "VB-BSL")
    ok = res["failed"] == 0 and len(wg_vals) == 10 and wg <= 0.05 and wg < bsl
    assert verdict(acceptance, 1, ok,
                   f"toy mean MSE VB-rBSL-WG {wg:.4g} (<= 0.05), VB-BSL {bsl:.4g}, failed {res['failed']}")


# ------------------------------------------------------------------ 2

def _wg_cloud(sim, seed):
    c = sim.simulate_summaries(np.array(sim.theta_true), 3000, stream(seed, "acceptance", sim.name))
    T, trace = wgflow.train(c[:1000], c[1000:2000], WGConfig(), seed=seed)
    test = c[2000:]
    return diagnostics.mardia_skewness(test), diagnostics.mardia_skewness(T(test)), T


def test_gaussianization_effect(acceptance):
    raw_t, wg_t, T = _wg_cloud(ToyModel(), 2)
    raw_g, wg_g, _ = _wg_cloud(GAndK(), 2)
    lb = T.metadata["final_lb"]
    ok = wg_t < 0.5 * raw_t and wg_g < 0.5 * raw_g and abs(lb - TOY_LB_TARGET) <= 0.3
    assert verdict(acceptance, 2, ok,
                   f"skewness toy {raw_t:.3g} -> {wg_t:.3g}, g-and-k {raw_g:.3g} -> {wg_g:.3g}; "
                   f"toy final LB {lb:.4f} vs {TOY_LB_TARGET:.4f}")


# ------------------------------------------------------------------ 3

def test_standard_normal_fixed_point(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for d in range(1, 7):
        x = rng.normal(size=(500, d)) * 10
        for eps in (1e-3, 0.05, 0.5, 1.0):
            worst = max(worst, float(np.max(np.abs(wgflow.flow_step(x, GaussianMixture.standard_normal(d), eps) - x))))
    assert verdict(acceptance, 3, worst == 0.0, f"max displacement {worst}")


# ------------------------------------------------------------------ 4

def test_gradient_unbiased(acceptance):
    lik, prior = gaussian_oracle(1.0)
    lj = vb.LogJoint(lik, prior)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(3):
        mu, c = rng.normal(), rng.uniform(0.7, 2.0)
        lam = VariationalParams(np.array([mu]), np.array([[c]]))
        cv = rng.normal(size=2)
        est = np.array([vb.estimate_lb_gradient(lam, lj, 5, cv, seed=r, iteration=1).gradient
                        for r in range(10_000)])
        se = est.std(0, ddof=1) / np.sqrt(len(est))
        worst = max(worst, float(np.max(np.abs(est.mean(0) - analytic_lb_gradient(mu, c, 1.0)) / se)))
    assert verdict(acceptance, 4, worst < 3.0, f"largest |mean - analytic| = {worst:.2f} SE")


# ------------------------------------------------------------------ 5

def test_gamma_posterior_quadrature(acceptance):
    errs = {d: grid_quadrature_error(d, seed=50 + d) for d in (1, 2, 3)}
    ok = all(e < 1e-6 for e in errs.values())
    assert verdict(acceptance, 5, ok, "max density error " + ", ".join(f"d={d}: {e:.2e}" for d, e in errs.items()))


# ------------------------------------------------------------------ 6

def test_control_variates_reduce_variance(acceptance):
    lik, prior = gaussian_oracle(1.0)
    lj = vb.LogJoint(lik, prior)
    rng = np.random.default_rng(6)
    worst = -np.inf
    for _ in range(20):
        lam = VariationalParams(rng.normal(size=1), np.array([[rng.uniform(0.5, 2.0)]]))
        sample = vb.estimate_lb_gradient(lam, lj, 400, None, seed=int(rng.integers(2**31)))
        c = vb.optimal_control_variates(sample.scores, sample.h)
        with_cv = np.var(sample.scores * (sample.h[:, None] - c), axis=0, ddof=1)
        without = np.var(sample.scores * sample.h[:, None], axis=0, ddof=1)
        worst = max(worst, float(np.max(with_cv - without)))
    assert verdict(acceptance, 6, worst <= 1e-9, f"max (CV var - plain var) = {worst:.3g}")


# ------------------------------------------------------------------ 7

def _fd(f, x, h):
    out = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_gradients_finite_differences(acceptance):
    rng = np.random.default_rng(7)
    worst_q = worst_mu = 0.0
    for _ in range(100):
        p = int(rng.integers(1, 5))
        lam = random_params(rng, p)
        theta = lam.sample(rng)
        fd = _fd(lambda v: vb.log_q(VariationalParams.unpack(v, p), theta), lam.pack(), 1e-6)
        worst_q = max(worst_q, float(np.max(np.abs(fd - vb.grad_log_q(lam, theta)))))

        k, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        a = rng.normal(size=(k, d, d))
        mix = GaussianMixture.from_covariances(rng.dirichlet(np.ones(k)), rng.normal(size=(k, d)) * 2,
                                               a @ np.swapaxes(a, 1, 2) + 0.5 * np.eye(d))
        x = rng.normal(size=d) * 1.5
        fd = _fd(lambda z: gmm.log_density(mix, z), x, 1e-5)
        worst_mu = max(worst_mu, float(np.max(np.abs(fd - gmm.grad_log_density(mix, x)))))
    ok = worst_q < 1e-5 and worst_mu < 1e-5
    assert verdict(acceptance, 7, ok, f"max error grad_log_q {worst_q:.2e}, grad_log_density {worst_mu:.2e}")


# ------------------------------------------------------------------ 8

def test_simulator_oracles(acceptance):
    gnk = gnk_octile_check()
    z_mean, z_var = stable_normal_check()
    toads = simulators.toads_statistics(TOAD_MATRIX)
    exact = bool(np.array_equal(toads, TOAD_EXPECTED))
    ok = gnk < 3.0 and z_mean < 3.0 and z_var < 3.0 and exact
    assert verdict(acceptance, 8, ok,
                   f"g-and-k octiles max {gnk:.2f} SE; alpha=2 mean {z_mean:.2f} SE, var {z_var:.2f} SE; "
                   f"toads hand matrix exact: {exact}")


# ------------------------------------------------------------------ 9

@pytest.mark.slow
def test_method_ranking(acceptance, tmp_path):
    parts = []
    ok = True
    for name in ("alpha_stable_desk", "gnk_desk"):
        res = run_config(name, tmp_path / name, ["VB-BSL", "VB-rBSL-WG"])
        wg, wg_vals = mean_mse(res["results"], "VB-rBSL-WG")
        bsl, bsl_vals = mean_mse(res["results"], "VB-BSL")
        every = len(wg_vals) == len(bsl_vals) == 3 and all(a < b for a, b in zip(wg_vals, bsl_vals))
        ok = ok and res["failed"] == 0 and every and wg < bsl
        parts.append(f"{name}: VB-rBSL-WG {wg:.4g} vs VB-BSL {bsl:.4g}, every replicate lower: {every}")
    assert verdict(acceptance, 9, ok, "; ".join(parts))


# ------------------------------------------------------------------ 10

def test_worker_count_invariance(acceptance, tmp_path):
    from test_harness import CSV_FILES, csv_bytes, tiny_config
    a = harness.replicate_and_report(tiny_config(tmp_path / "w1"), workers=1)
    b = harness.replicate_and_report(tiny_config(tmp_path / "w3"), workers=3)
    same = csv_bytes(a["output"]) == csv_bytes(b["output"])
    assert verdict(acceptance, 10, same, f"{len(CSV_FILES)} CSV files byte-identical for 1 vs 3 workers: {same}")
