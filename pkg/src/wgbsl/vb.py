"""Marginal variational Bayes for BSL and mean-adjusted robust BSL.

The variational family is a Gaussian q = N(mu, (C C^T)^-1) with C lower
triangular.  The lower-bound gradient is estimated with the score-function
estimator and per-coordinate control variates; for the robust variant the
adjustment vector Gamma is drawn from its exact Gaussian conditional
posterior so that only theta is approximated variationally.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import slcore
from .likelihood import GaussianPrior, SimulatorFailure
from .seeding import stream
from .slcore import LOG_2PI

log = logging.getLogger(__name__)

VB_METHODS = ("BSL", "rBSL-M")
MAX_RESAMPLES = 5


class VBDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VariationalParams:
    """q = N(mu, Sigma) with Sigma^-1 = C C^T and C lower triangular."""

    mu: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        C = np.tril(np.atleast_2d(np.asarray(self.C, dtype=float)))
        if C.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError("C must be p x p")
        if np.any(np.diag(C) <= 0):
            raise ValueError("C needs a strictly positive diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "C", C)

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def size(self) -> int:
        return self.p + self.p * (self.p + 1) // 2

    @property
    def cov(self) -> np.ndarray:
        cinv = np.linalg.inv(self.C)
        return cinv.T @ cinv

    def pack(self) -> np.ndarray:
        rows, cols = vech_indices(self.p)
        return np.concatenate([self.mu, self.C[rows, cols]])

    @classmethod
    def unpack(cls, lam, p: int) -> "VariationalParams":
        lam = np.asarray(lam, dtype=float)
        rows, cols = vech_indices(p)
        C = np.zeros((p, p))
        C[rows, cols] = lam[p:]
        return cls(lam[:p].copy(), C)

    def sample(self, rng, size=None) -> np.ndarray:
        """theta = mu + C^-T z."""
        shape = (self.p,) if size is None else (size, self.p)
        z = rng.standard_normal(shape)
        return self.mu + np.linalg.solve(self.C.T, z.T).T

    def digest(self) -> str:
        return hashlib.sha1(self.pack().tobytes()).hexdigest()[:12]


def vech_indices(p: int):
    """Row/column indices of the lower triangle, stacked column by column."""
    cols, rows = np.triu_indices(p)
    return rows, cols


def log_q(lam: VariationalParams, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    u = np.einsum("ji,...j->...i", lam.C, theta - lam.mu)  # C^T (theta - mu)
    return -0.5 * lam.p * LOG_2PI + np.sum(np.log(np.diag(lam.C))) - 0.5 * np.sum(u * u, axis=-1)


def grad_log_q(lam: VariationalParams, theta) -> np.ndarray:
    """Score of q with respect to the packed parameters (mu, vech(C))."""
    theta = np.asarray(theta, dtype=float)
    diff = theta - lam.mu
    prec = lam.C @ lam.C.T
    g_mu = diff @ prec.T
    g_c = np.diag(1.0 / np.diag(lam.C)) - np.einsum("...i,...j->...ij", diff, diff) @ lam.C
    rows, cols = vech_indices(lam.p)
    return np.concatenate([g_mu, g_c[..., rows, cols]], axis=-1)


def h_lambda(
    method: str,
    lam: VariationalParams,
    theta,
    est: slcore.SyntheticLikelihoodEstimate,
    s_obs,
    log_prior_theta,
    gamma=None,
    gamma_post: Optional[slcore.GammaPosterior] = None,
    sigma0: float = 0.5,
) -> np.ndarray:
    """log p(theta) [+ log p(Gamma)] + log N(s_obs; mean, Sigma_hat) - log q(theta) [- log p(Gamma | theta, s_obs)]."""
    lq = log_q(lam, theta)
    if method == "BSL":
        return log_prior_theta + slcore.synthetic_log_lik("BSL", est, s_obs) - lq
    if method != "rBSL-M":
        raise ValueError(f"VB supports {VB_METHODS}, not {method!r}")
    if gamma is None or gamma_post is None:
        raise ValueError("rBSL-M needs gamma and its conditional posterior")
    prior_g = slcore.gamma_log_prior(gamma, slcore.GammaPrior("gaussian", sigma0))
    chol = np.linalg.cholesky(gamma_post.cov)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    post_g = slcore.gaussian_log_density(gamma, gamma_post.mean, chol, logdet)
    lik = slcore.synthetic_log_lik("rBSL-M", est, s_obs, gamma)
    return log_prior_theta + prior_g + lik - lq - post_g


class LogJoint:
    """Per-sample log p(theta, [Gamma,] s_obs) [- log p(Gamma | theta, s_obs)] for a batch of thetas.

    Rows whose simulation failed come back as NaN.
    """

    def __init__(self, likelihood, prior: GaussianPrior, method: str = "BSL", sigma0: float = 0.5):
        if method not in VB_METHODS:
            raise ValueError(f"VB supports {VB_METHODS}, not {method!r}")
        self.likelihood = likelihood
        self.prior = prior
        self.method = method
        self.sigma0 = sigma0

    def __call__(self, thetas, sim_rngs, gamma_rngs, executor=None) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        out = np.full(len(thetas), np.nan)
        est, ok = self.likelihood.estimate_batch(thetas, sim_rngs, executor)
        if est is None:
            return out
        s_obs = self.likelihood.s_obs
        lp = self.prior.logpdf(thetas[ok])
        if self.method == "BSL":
            vals = lp + slcore.synthetic_log_lik("BSL", est, s_obs)
        else:
            post = slcore.gamma_posterior(est, s_obs, self.sigma0)
            chol = np.linalg.cholesky(post.cov)
            idx = np.flatnonzero(ok)
            z = np.stack([gamma_rngs[i].standard_normal(self.likelihood.d) for i in idx])
            gamma = post.mean + np.einsum("...ij,...j->...i", chol, z)
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            vals = (
                lp
                + slcore.gamma_log_prior(gamma, slcore.GammaPrior("gaussian", self.sigma0))
                + slcore.synthetic_log_lik("rBSL-M", est, s_obs, gamma)
                - slcore.gaussian_log_density(gamma, post.mean, chol, logdet)
            )
        out[ok] = vals
        return out


@dataclass
class VBConfig:
    S: int = 400
    N: int = 200
    beta1: float = 0.9
    beta2: float = 0.9
    eps0: float = 0.01
    tau: float = 1000.0
    t_W: int = 50
    P: int = 50
    method: str = "BSL"
    sigma0: float = 0.5
    max_iter: int = 5000
    # initial q standard deviation; None means half the prior standard deviation
    init_sd: Optional[float] = None

    def __post_init__(self):
        if self.method not in VB_METHODS:
            raise ValueError(f"VB supports {VB_METHODS}, not {self.method!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if min(self.S, self.N, self.t_W) < 1 or self.P < 0 or self.eps0 <= 0 or self.tau <= 0:
            raise ValueError("invalid VB configuration")


@dataclass
class VBState:
    lam: VariationalParams
    gbar: np.ndarray
    vbar: np.ndarray
    c: np.ndarray
    t: int = 0
    patience: int = 0
    lb_history: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)
    halved: bool = False
    stopped: bool = False


def optimal_control_variates(grads, h_values) -> np.ndarray:
    """c_i = cov(g_i h, g_i) / var(g_i), with c_i = 0 where var(g_i) = 0."""
    g = np.asarray(grads, dtype=float)
    h = np.asarray(h_values, dtype=float)
    if g.shape[0] < 2:
        raise ValueError("need at least two samples")
    gh = g * h[:, None]
    gc = g - g.mean(axis=0)
    cov = np.sum((gh - gh.mean(axis=0)) * gc, axis=0) / (len(h) - 1)
    var = np.sum(gc * gc, axis=0) / (len(h) - 1)
    out = np.zeros_like(var)
    nz = var > 0
    out[nz] = cov[nz] / var[nz]
    return out


@dataclass
class GradientSample:
    gradient: np.ndarray
    lb: float
    thetas: np.ndarray
    h: np.ndarray
    scores: np.ndarray


def estimate_lb_gradient(
    lam: VariationalParams,
    log_joint: Callable,
    S: int,
    c=None,
    seed: int = 0,
    iteration: int = 0,
    executor=None,
) -> GradientSample:
    """Score-function estimate of the lower-bound gradient with control variates ``c``.

    Sample i of iteration t draws from the stream (seed, t, i, attempt, purpose),
    so the result does not depend on how simulations are distributed.
    """
    if S < 2:
        raise ValueError("need S >= 2")
    c = np.zeros(lam.size) if c is None else np.asarray(c, dtype=float)
    thetas = np.empty((S, lam.p))
    values = np.full(S, np.nan)
    pending = np.arange(S)
    for attempt in range(MAX_RESAMPLES + 1):
        for i in pending:
            thetas[i] = lam.sample(stream(seed, iteration, i, attempt, 0))
        sim_rngs = [stream(seed, iteration, i, attempt, 1) for i in pending]
        gamma_rngs = [stream(seed, iteration, i, attempt, 2) for i in pending]
        values[pending] = log_joint(thetas[pending], sim_rngs, gamma_rngs, executor)
        pending = pending[~np.isfinite(values[pending])]
        if len(pending) == 0:
            break
        log.debug("iteration %d: resampling %d failed draws", iteration, len(pending))
    else:
        raise SimulatorFailure("simulator failure")
    h = values - log_q(lam, thetas)
    scores = grad_log_q(lam, thetas)
    grad = np.mean(scores * (h[:, None] - c), axis=0)
    return GradientSample(grad, float(np.mean(h)), thetas, h, scores)


def initial_params(prior: GaussianPrior, init_sd: Optional[float] = None, mu=None) -> VariationalParams:
    mu = prior.mean.copy() if mu is None else np.asarray(mu, dtype=float)
    sd = prior.sd / 2.0 if init_sd is None else np.full(prior.p, float(init_sd))
    return VariationalParams(mu, np.diag(1.0 / sd))


@dataclass
class TraceRow:
    iteration: int
    lb: float
    smoothed_lb: float
    alpha: float
    patience: int
    cv_norm: float
    digest: str


def optimize(
    config: VBConfig,
    log_joint: Callable,
    init: VariationalParams,
    seed: int = 0,
    executor=None,
    callback=None,
):
    """Adaptive-learning-rate VB with moving-average lower-bound stopping.

    Returns ``(state, trace)`` where ``trace`` is a list of :class:`TraceRow`.
    Control variates estimated from iteration t are applied at t + 1.
    """
    lam = init
    first = estimate_lb_gradient(lam, log_joint, config.S, None, seed, 0, executor)
    g0 = first.gradient
    state = VBState(lam, g0.copy(), g0**2, optimal_control_variates(first.scores, first.h))
    trace: List[TraceRow] = []
    eps0 = config.eps0
    best = -np.inf
    while not state.stopped:
        t = state.t
        sample = estimate_lb_gradient(state.lam, log_joint, config.S, state.c, seed, t + 1, executor)
        g = sample.gradient
        c_next = optimal_control_variates(sample.scores, sample.h)
        alpha = eps0 if t == 0 else min(eps0, eps0 * config.tau / t)
        gbar = config.beta1 * state.gbar + (1 - config.beta1) * g
        vbar = config.beta2 * state.vbar + (1 - config.beta2) * g**2
        new = None
        if np.all(np.isfinite(g)):
            step = state.lam.pack() + alpha * gbar / np.sqrt(vbar)
            try:
                new = VariationalParams.unpack(step, state.lam.p)
            except ValueError:
                new = None
        if new is None:
            if state.halved:
                raise VBDivergedError("VB diverged")
            state.halved = True
            eps0 *= 0.5
            log.warning("rejected VB step at t=%d, learning rate halved to %g", t, eps0)
            state.t += 1
            continue
        state.lam, state.gbar, state.vbar = new, gbar, vbar
        state.lb_history.append(sample.lb)
        window = state.lb_history[-config.t_W:]
        smoothed = float(np.mean(window))
        state.smoothed.append(smoothed)
        if t >= config.t_W:
            if smoothed >= best:
                state.patience = 0
                best = smoothed
            else:
                state.patience += 1
            if state.patience >= config.P:
                state.stopped = True
        state.c = c_next
        trace.append(
            TraceRow(t, sample.lb, smoothed, alpha, state.patience, float(np.linalg.norm(state.c)), state.lam.digest())
        )
        if callback is not None:
            callback(state, trace[-1])
        state.t += 1
        if state.t >= config.max_iter:
            log.warning("VB stopped at max_iter=%d without meeting the patience rule", config.max_iter)
            state.stopped = True
    return state, trace


def with_method(config: VBConfig, method: str) -> VBConfig:
    return replace(config, method=method)
