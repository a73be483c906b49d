"""Simulation-based synthetic likelihoods and priors in the working space."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import slcore
from .simulators import Simulator
from .slcore import LOG_2PI, SyntheticLikelihoodEstimate
from .wgflow import WGTransform, apply, transport

log = logging.getLogger(__name__)


class SimulatorFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianPrior:
    """Independent normal prior on the working parameters."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def isotropic(cls, p: int, sd: float = 10.0, mean: float = 0.0) -> "GaussianPrior":
        return cls(np.full(p, float(mean)), np.full(p, float(sd)))

    @property
    def p(self) -> int:
        return len(self.mean)

    def logpdf(self, theta) -> np.ndarray:
        z = (np.asarray(theta, dtype=float) - self.mean) / self.sd
        return np.sum(-0.5 * LOG_2PI - np.log(self.sd) - 0.5 * z * z, axis=-1)


def _simulate_chunk(simulator, thetas, n_sims, rngs):
    """Worker body: simulate and summarize for a list of natural parameter vectors."""
    out = []
    for theta, rng in zip(thetas, rngs):
        try:
            s = simulator.simulate_summaries(theta, n_sims, rng)
            if not np.all(np.isfinite(s)):
                raise FloatingPointError("non-finite summaries")
        except (ValueError, FloatingPointError, ArithmeticError) as err:
            log.debug("simulation failed at %s: %s", theta, err)
            out.append(None)
            continue
        out.append(s)
    return out


class SyntheticLikelihood:
    """Gaussian synthetic likelihood of an observed summary vector.

    Parameters are given in the simulator's working space.  With a
    ``transform`` both the observed and every simulated summary vector are
    mapped through it before the moments are taken.
    """

    def __init__(
        self,
        simulator: Simulator,
        s_obs,
        n_sims: int,
        transform: Optional[WGTransform] = None,
    ):
        self.simulator = simulator
        self.raw_s_obs = np.asarray(s_obs, dtype=float)
        self.n_sims = int(n_sims)
        self.transform = transform
        self.s_obs = apply(transform, self.raw_s_obs) if transform is not None else self.raw_s_obs

    @property
    def d(self) -> int:
        return self.s_obs.shape[-1]

    def simulate_many(self, thetas, rngs, executor=None):
        """Summaries for each working theta; a list holding None where simulation failed."""
        natural = []
        for w in np.atleast_2d(thetas):
            try:
                natural.append(self.simulator.check(self.simulator.constrain(w)))
            except ValueError:
                natural.append(None)
        good = [i for i, t in enumerate(natural) if t is not None]
        sims = [None] * len(natural)
        if executor is None or len(good) < 2:
            res = _simulate_chunk(self.simulator, [natural[i] for i in good], self.n_sims,
                                  [rngs[i] for i in good])
        else:
            workers = getattr(executor, "_max_workers", 2)
            chunks = np.array_split(np.array(good), workers)
            futures = [
                executor.submit(_simulate_chunk, self.simulator, [natural[i] for i in c], self.n_sims,
                                [rngs[i] for i in c])
                for c in chunks if len(c)
            ]
            res = [s for f in futures for s in f.result()]
        for i, s in zip(good, res):
            sims[i] = s
        return sims

    def estimate_batch(self, thetas, rngs, executor=None):
        """Batched moment estimates; returns (estimate over ok rows, ok mask)."""
        sims = self.simulate_many(thetas, rngs, executor)
        ok = np.array([s is not None for s in sims])
        if not ok.any():
            return None, ok
        stacked = np.stack([s for s in sims if s is not None])
        if self.transform is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                stacked = transport(self.transform, stacked)
            finite = np.all(np.isfinite(stacked), axis=(-2, -1))
            if not finite.all():
                ok[np.flatnonzero(ok)[~finite]] = False
                stacked = stacked[finite]
                if not ok.any():
                    return None, ok
        # a degenerate covariance only invalidates its own row
        try:
            est = slcore.sample_moments(stacked)
        except slcore.DegenerateCovarianceError:
            rows = []
            for j, s in enumerate(stacked):
                try:
                    rows.append(slcore.sample_moments(s))
                except slcore.DegenerateCovarianceError:
                    rows.append(None)
            idx = np.flatnonzero(ok)
            for j, r in enumerate(rows):
                if r is None:
                    ok[idx[j]] = False
            rows = [r for r in rows if r is not None]
            if not rows:
                return None, ok
            est = SyntheticLikelihoodEstimate(
                *(np.stack([getattr(r, f) for r in rows]) for f in ("mean", "cov", "chol", "logdet", "jitter"))
            )
        return est, ok

    def estimate(self, theta, rng) -> SyntheticLikelihoodEstimate:
        est, ok = self.estimate_batch(np.atleast_2d(theta), [rng])
        if not ok[0]:
            raise SimulatorFailure("simulator failure")
        return slcore.take(est, 0)


class ExactGaussianLikelihood:
    """Tractable stand-in: s_obs ~ N(theta, cov) with no simulation noise.

    Used as an analytic oracle for the VB and MCMC machinery.
    """

    def __init__(self, s_obs, cov=None):
        self.s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
        d = self.s_obs.shape[0]
        self.cov = np.eye(d) if cov is None else np.asarray(cov, dtype=float)
        self.calls = 0

    @property
    def d(self) -> int:
        return self.s_obs.shape[0]

    def estimate_batch(self, thetas, rngs, executor=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        self.calls += len(thetas)
        cov = np.broadcast_to(self.cov, (len(thetas), self.d, self.d)).copy()
        chol = np.linalg.cholesky(cov)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        est = SyntheticLikelihoodEstimate(thetas.copy(), cov, chol, logdet, np.zeros(len(thetas)))
        return est, np.ones(len(thetas), dtype=bool)

    def estimate(self, theta, rng) -> SyntheticLikelihoodEstimate:
        est, _ = self.estimate_batch(np.atleast_2d(theta), [rng])
        return slcore.take(est, 0)
