"""Mixture-of-normals density estimation: EM fitting, evaluation, gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .slcore import LOG_2PI


@dataclass(frozen=True)
class EMConfig:
    tol: float = 1e-7
    max_iter: int = 500
    restarts: int = 3
    # eigenvalue floor, relative to the mean per-coordinate variance of the cloud
    cov_floor: float = 1e-6


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of K Gaussians in d dimensions, stored by Cholesky factors."""

    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray
    logdets: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.chols, dtype=float).reshape(m.shape[0], m.shape[1], m.shape[1])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(np.diagonal(c, axis1=1, axis2=2) <= 0):
            raise ValueError("Cholesky factors need a positive diagonal")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "chols", c)
        logdets = 2.0 * np.sum(np.log(np.diagonal(c, axis1=1, axis2=2)), axis=1)
        object.__setattr__(self, "logdets", logdets)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @cached_property
    def _inv_chols(self) -> np.ndarray:
        eye = np.broadcast_to(np.eye(self.dim), self.chols.shape)
        return np.tril(np.linalg.solve(self.chols, eye))

    @cached_property
    def _log_norm(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * self.dim * LOG_2PI - 0.5 * self.logdets

    @classmethod
    def standard_normal(cls, d: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, d)), np.eye(d)[None])

    @classmethod
    def from_covariances(cls, weights, means, covs) -> "GaussianMixture":
        return cls(np.asarray(weights, float), means, np.linalg.cholesky(np.asarray(covs, float)))

    @property
    def covariances(self) -> np.ndarray:
        return self.chols @ np.swapaxes(self.chols, 1, 2)

    @cached_property
    def _stacked(self):
        # x @ fwd gives every L_k^{-1} x side by side; offset holds L_k^{-1} m_k
        k, d = self.means.shape
        fwd = np.swapaxes(self._inv_chols, 1, 2).transpose(1, 0, 2).reshape(d, k * d)
        offset = np.einsum("kij,kj->ki", self._inv_chols, self.means).ravel()
        back = self._inv_chols.reshape(k * d, d)
        return fwd, offset, back

    def _whitened(self, x: np.ndarray) -> np.ndarray:
        # z[..., k, :] = L_k^{-1} (x - m_k)
        fwd, offset, _ = self._stacked
        k, d = self.means.shape
        flat = x.reshape(-1, d) @ fwd - offset
        return flat.reshape(x.shape[:-1] + (k, d))

    def component_log_densities(self, x) -> np.ndarray:
        """log(w_k) + log N(x; m_k, S_k) for every component, shape (..., K)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError("dimension mismatch")
        z = self._whitened(x)
        return self._log_norm - 0.5 * np.sum(z * z, axis=-1)

    def log_density_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError("dimension mismatch")
        flat = np.ascontiguousarray(x.reshape(-1, self.dim))
        logp, grad = _mixture_kernel(flat, self._log_norm, self.means, self._inv_chols)
        return logp.reshape(x.shape[:-1]), grad.reshape(x.shape)

    def _log_density_and_grad_reference(self, x):
        # plain numpy version of the kernel, kept for cross-checking
        x = np.asarray(x, dtype=float)
        k, d = self.means.shape
        z = self._whitened(x)
        comp = self._log_norm - 0.5 * np.sum(z * z, axis=-1)
        logp = logsumexp(comp, axis=-1)
        resp = np.exp(comp - logp[..., None])
        # sum_k r_k * (-S_k^{-1}(x - m_k)) = -sum_k r_k L_k^{-T} z_k
        _, _, back = self._stacked
        grad = -((resp[..., None] * z).reshape(-1, k * d) @ back)
        return logp, grad.reshape(x.shape)


@numba.njit(cache=True)
def _mixture_kernel(x, log_norm, means, inv_chols):
    m, d = x.shape
    k = means.shape[0]
    logp = np.empty(m)
    grad = np.zeros((m, d))
    comp = np.empty(k)
    z = np.empty((k, d))
    diff = np.empty(d)
    for i in range(m):
        top = -np.inf
        for c in range(k):
            for a in range(d):
                diff[a] = x[i, a] - means[c, a]
            q = 0.0
            for a in range(d):
                acc = 0.0
                for b in range(a + 1):
                    acc += inv_chols[c, a, b] * diff[b]
                z[c, a] = acc
                q += acc * acc
            comp[c] = log_norm[c] - 0.5 * q
            if comp[c] > top:
                top = comp[c]
        if top == -np.inf:
            logp[i] = -np.inf
            for a in range(d):
                grad[i, a] = np.nan
            continue
        total = 0.0
        for c in range(k):
            # components this far below the top one contribute under 1e-17
            if comp[c] - top < -40.0:
                comp[c] = 0.0
            else:
                comp[c] = np.exp(comp[c] - top)
            total += comp[c]
        logp[i] = top + np.log(total)
        for c in range(k):
            if comp[c] == 0.0:
                continue
            r = comp[c] / total
            # -r * L^{-T} z, using the lower-triangular structure of L^{-1}
            for b in range(d):
                acc = 0.0
                for a in range(b, d):
                    acc += inv_chols[c, a, b] * z[c, a]
                grad[i, b] -= r * acc
    return logp, grad


def log_density(mix: GaussianMixture, x) -> np.ndarray:
    """log sum_k w_k N(x; m_k, S_k), evaluated by log-sum-exp."""
    return logsumexp(mix.component_log_densities(x), axis=-1)


def grad_log_density(mix: GaussianMixture, x) -> np.ndarray:
    """Gradient of :func:`log_density` with respect to x."""
    return mix.log_density_and_grad(x)[1]


@dataclass
class FitResult:
    mixture: GaussianMixture
    log_likelihood: float
    history: list
    n_iter: int


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centres = [x[rng.integers(m)]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(m)
        else:
            idx = rng.choice(m, p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _m_step(x, resp, floor, fallback_cov):
    m, d = x.shape
    nk = resp.sum(axis=0)
    k = nk.shape[0]
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for j in range(k):
        if nk[j] < 1e-10 * m:
            # empty component: park it on the worst-explained point with the cloud covariance
            means[j] = x[np.argmin(resp.sum(axis=1))]
            covs[j] = fallback_cov
            nk[j] = 1.0
            continue
        means[j] = resp[:, j] @ x / nk[j]
        diff = x - means[j]
        covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j]
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    vals, vecs = np.linalg.eigh(covs)
    if np.any(vals < floor):
        vals = np.maximum(vals, floor)
        covs = np.einsum("kij,kj,klj->kil", vecs, vals, vecs)
    weights = nk / nk.sum()
    return GaussianMixture(weights, means, np.linalg.cholesky(covs))


def _run_em(x, mix, config, floor, fallback_cov):
    history = []
    prev = -np.inf
    for it in range(config.max_iter):
        comp = mix.component_log_densities(x)
        logp = logsumexp(comp, axis=1)
        ll = float(logp.sum())
        history.append(ll)
        if it > 0 and abs(ll - prev) <= config.tol * abs(ll):
            break
        prev = ll
        resp = np.exp(comp - logp[:, None])
        mix = _m_step(x, resp, floor, fallback_cov)
    else:
        ll = float(log_density(mix, x).sum())
        history.append(ll)
    return mix, history


def fit(
    cloud,
    n_components: int,
    config: EMConfig = EMConfig(),
    rng: Optional[np.random.Generator] = None,
    init: Optional[GaussianMixture] = None,
) -> FitResult:
    """Fit a Gaussian mixture by EM.

    Without ``init`` the best of ``config.restarts`` k-means++ seeded runs
    (highest training log-likelihood) is returned.  With ``init`` a single
    warm-started EM run is performed from that mixture.
    """
    x = np.asarray(cloud, dtype=float)
    if x.ndim != 2:
        raise ValueError("cloud must be an (M, d) array")
    m, d = x.shape
    k = int(n_components)
    if k < 1:
        raise ValueError("need at least one component")
    if m < k * (d + 1):
        raise ValueError(f"{m} particles are too few for {k} components in {d} dimensions")
    rng = np.random.default_rng() if rng is None else rng

    glob_cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    floor = config.cov_floor * max(float(np.mean(np.diag(glob_cov))), 1e-300)
    fallback = glob_cov + floor * np.eye(d)

    if init is not None:
        starts = [init]
    elif k == 1:
        starts = [None]
    else:
        starts = []
        for _ in range(max(1, config.restarts)):
            centres = _kmeanspp(x, k, rng)
            labels = np.argmin(((x[:, None, :] - centres[None]) ** 2).sum(-1), axis=1)
            resp = np.zeros((m, k))
            resp[np.arange(m), labels] = 1.0
            starts.append(_m_step(x, resp, floor, fallback))

    best = None
    for start in starts:
        if start is None:
            start = _m_step(x, np.ones((m, 1)), floor, fallback)
        mix, history = _run_em(x, start, config, floor, fallback)
        if best is None or history[-1] > best.log_likelihood:
            best = FitResult(mix, history[-1], history, len(history))
    return best


def select_components(
    train,
    validation,
    candidates: Sequence[int] = (1, 2, 3, 5, 8),
    config: EMConfig = EMConfig(),
    rng: Optional[np.random.Generator] = None,
):
    """Choose K by average validation log-density; returns (K, fit result, scores)."""
    train = np.asarray(train, dtype=float)
    validation = np.asarray(validation, dtype=float)
    m, d = train.shape
    scores = {}
    best_k, best_fit = None, None
    for k in candidates:
        if m < k * (d + 1):
            continue
        res = fit(train, k, config, rng)
        score = float(np.mean(log_density(res.mixture, validation)))
        scores[k] = score
        if best_k is None or score > scores[best_k]:
            best_k, best_fit = k, res
    return best_k, best_fit, scores
