"""Pseudo-marginal random-walk Metropolis for the (robust) synthetic likelihood posteriors.

Robust variants sample theta and the adjustment vector Gamma jointly.  The
log-likelihood estimate of the current state is stored and only replaced on
acceptance, which is what makes the chain pseudo-marginal.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import slcore
from .likelihood import GaussianPrior, SimulatorFailure
from .seeding import stream
from .slcore import GammaPrior

log = logging.getLogger(__name__)

MCMC_METHODS = slcore.METHODS
ADAPT_EVERY = 100
TARGET_ACCEPTANCE = (0.20, 0.30)


@dataclass
class MCMCConfig:
    iterations: int = 20000
    N: int = 200
    method: str = "BSL"
    # proposal standard deviations for theta (working space); a scalar is broadcast,
    # None lets the caller supply one (the harness uses the pilot posterior sd)
    proposal_scale: object = None
    # proposal standard deviation for every Gamma component
    gamma_scale: float = 0.1
    gamma_prior: GammaPrior = field(default_factory=GammaPrior)
    # scales are tuned on blocks of ADAPT_EVERY iterations over this many iterations, then frozen;
    # None means a quarter of the chain
    adapt_iters: Optional[int] = None

    def __post_init__(self):
        if self.method not in MCMC_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.iterations < 1 or self.N < 2:
            raise ValueError("invalid MCMC configuration")
        scale = 0.0 if self.proposal_scale is None else np.asarray(self.proposal_scale, dtype=float)
        if np.any(scale < 0) or self.gamma_scale < 0:
            raise ValueError("proposal scales must be nonnegative")
        if isinstance(self.gamma_prior, dict):
            self.gamma_prior = GammaPrior(**self.gamma_prior)

    @property
    def n_adapt(self) -> int:
        return self.iterations // 4 if self.adapt_iters is None else int(self.adapt_iters)

    @property
    def robust(self) -> bool:
        return self.method != "BSL"


@dataclass
class Chain:
    thetas: np.ndarray
    gammas: Optional[np.ndarray]
    loglik: np.ndarray
    accepted: np.ndarray
    scale: float
    n_adapt: int
    method: str

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / len(self.accepted)

    @property
    def states(self) -> np.ndarray:
        if self.gammas is None:
            return self.thetas
        return np.hstack([self.thetas, self.gammas])

    def kept(self, burn_in: Optional[int] = None) -> np.ndarray:
        """theta draws after discarding the adaptation phase (or ``burn_in``)."""
        start = self.n_adapt if burn_in is None else burn_in
        return self.thetas[start:]

    def to_csv(self, path) -> None:
        p = self.thetas.shape[1]
        d = 0 if self.gammas is None else self.gammas.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"theta{i}" for i in range(p)] + [f"gamma{j}" for j in range(d)]
                       + ["loglik", "accepted"])
            for t in range(len(self.loglik)):
                row = [t] + [repr(float(v)) for v in self.thetas[t]]
                if d:
                    row += [repr(float(v)) for v in self.gammas[t]]
                w.writerow(row + [repr(float(self.loglik[t])), int(self.accepted[t])])


def _log_target(likelihood, prior, method, gamma_prior, theta, gamma, rng):
    """log p(theta) [+ log p(Gamma)] + estimated synthetic log-likelihood."""
    lp = float(prior.logpdf(theta))
    if method != "BSL":
        lp += float(slcore.gamma_log_prior(gamma, gamma_prior))
    if not np.isfinite(lp):
        return -np.inf, -np.inf
    try:
        est = likelihood.estimate(theta, rng)
    except (SimulatorFailure, slcore.DegenerateCovarianceError) as err:
        log.info("proposal rejected: %s", err)
        return -np.inf, -np.inf
    ll = float(slcore.synthetic_log_lik(method, est, likelihood.s_obs, gamma))
    if not np.isfinite(ll):
        return -np.inf, -np.inf
    return lp + ll, ll


def run(config: MCMCConfig, likelihood, prior: GaussianPrior, init, seed: int = 0, gamma_init=None) -> Chain:
    """Run one chain.

    The draws of iteration t come from the streams (seed, "mcmc", t, purpose)
    with purpose 0 for the proposal, 1 for simulation and 2 for the accept test.
    """
    theta = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    p = theta.shape[0]
    d = likelihood.d
    method = config.method
    gamma = None
    if config.robust:
        gamma = np.zeros(d) if gamma_init is None else np.asarray(gamma_init, dtype=float).copy()
    if config.proposal_scale is None:
        raise ValueError("proposal_scale must be set")
    theta_sd = np.broadcast_to(np.asarray(config.proposal_scale, dtype=float), (p,)).copy()

    cur, cur_ll = _log_target(likelihood, prior, method, config.gamma_prior, theta, gamma,
                              stream(seed, "mcmc", "init", 1))
    if not np.isfinite(cur):
        raise ValueError("initial state has zero posterior density")

    T = config.iterations
    thetas = np.empty((T, p))
    gammas = np.empty((T, d)) if config.robust else None
    lls = np.empty(T)
    acc = np.zeros(T, dtype=bool)
    scale = 1.0
    block = 0
    for t in range(T):
        r = stream(seed, "mcmc", t, 0)
        prop = theta + scale * theta_sd * r.standard_normal(p)
        gprop = None
        if config.robust:
            gprop = gamma + scale * config.gamma_scale * r.standard_normal(d)
        new, new_ll = _log_target(likelihood, prior, method, config.gamma_prior, prop, gprop,
                                  stream(seed, "mcmc", t, 1))
        u = stream(seed, "mcmc", t, 2).random()
        if np.isfinite(new) and np.log(u) < new - cur:
            theta, gamma, cur, cur_ll = prop, gprop, new, new_ll
            acc[t] = True
            block += 1
        thetas[t] = theta
        if gammas is not None:
            gammas[t] = gamma
        lls[t] = cur_ll
        if t < config.n_adapt and (t + 1) % ADAPT_EVERY == 0:
            rate = block / ADAPT_EVERY
            if rate < TARGET_ACCEPTANCE[0]:
                scale *= 0.7
            elif rate > TARGET_ACCEPTANCE[1]:
                scale *= 1.3
            block = 0
        elif (t + 1) % ADAPT_EVERY == 0:
            block = 0
    chain = Chain(thetas, gammas, lls, acc, scale, min(config.n_adapt, T), method)
    log.info("MCMC %s: acceptance %.3f, final scale %.3g", method, chain.acceptance_rate, scale)
    return chain
