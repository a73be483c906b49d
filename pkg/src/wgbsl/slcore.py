"""Synthetic-likelihood density computations.

Sample moments of simulated summaries, the robust mean/variance
adjustments, the Gaussian posterior of the adjustment vector and the
resulting log-likelihood values.  Every function accepts optional leading
batch dimensions so that the S parameter draws of one VB iteration can be
processed in a single call.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

METHODS = ("BSL", "rBSL-M", "rBSL-V")

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class DegenerateCovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticLikelihoodEstimate:
    """Sample mean and covariance of N simulated summary vectors.

    ``chol`` is the lower Cholesky factor of ``cov + jitter * I``; ``logdet``
    is the log-determinant of that jittered matrix.  Fields may carry a
    leading batch shape.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    logdet: np.ndarray
    jitter: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[-1]


@dataclass(frozen=True)
class GammaPrior:
    """Independent prior on each component of the adjustment vector.

    kind is one of ``"gaussian"`` (``scale`` = standard deviation sigma0),
    ``"laplace"`` (``scale`` = Laplace scale) or ``"exponential"``
    (``scale`` = rate).
    """

    kind: str = "gaussian"
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplace", "exponential"):
            raise ValueError(f"unknown gamma prior kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("gamma prior scale must be positive")


@dataclass(frozen=True)
class GammaPosterior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov)


def _jittered_cholesky(cov: np.ndarray):
    """Cholesky with escalating diagonal jitter, for a single d x d matrix."""
    d = cov.shape[-1]
    scale = np.trace(cov) / d
    eye = np.eye(d)
    eps = JITTER_START
    while eps <= JITTER_MAX * (1 + 1e-9):
        jitter = eps * scale
        try:
            chol = np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            eps *= 10.0
            continue
        if np.all(np.diag(chol) > 0) and np.all(np.isfinite(chol)):
            return chol, jitter
        eps *= 10.0
    raise DegenerateCovarianceError("degenerate covariance")


def factorize(cov: np.ndarray):
    """Jittered Cholesky factor, log-determinant and jitter for (batched) covariances."""
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[-1]
    batch = cov.shape[:-2]
    scale = np.trace(cov, axis1=-2, axis2=-1) / d
    jitter = JITTER_START * scale
    try:
        chol = np.linalg.cholesky(cov + jitter[..., None, None] * np.eye(d))
        ok = np.all(np.diagonal(chol, axis1=-2, axis2=-1) > 0) and np.all(np.isfinite(chol))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        # slow path: escalate jitter matrix by matrix
        flat = cov.reshape((-1, d, d))
        chols = np.empty_like(flat)
        jit = np.empty(flat.shape[0])
        for i, c in enumerate(flat):
            chols[i], jit[i] = _jittered_cholesky(c)
        chol = chols.reshape(batch + (d, d))
        jitter = jit.reshape(batch)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return chol, logdet, jitter


def sample_moments(summaries) -> SyntheticLikelihoodEstimate:
    """Sample mean and covariance (divisor N) of simulated summaries.

    Parameters
    ----------
    summaries : array_like, shape (..., N, d)
        N summary vectors, optionally for a batch of parameter values.
    """
    s = np.asarray(summaries, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[-2] == 0:
        raise ValueError("no summaries")
    n = s.shape[-2]
    mean = s.mean(axis=-2)
    centred = s - mean[..., None, :]
    cov = np.einsum("...ni,...nj->...ij", centred, centred) / n
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    chol, logdet, jitter = factorize(cov)
    return SyntheticLikelihoodEstimate(mean=mean, cov=cov, chol=chol, logdet=logdet, jitter=jitter)


def _scales(est: SyntheticLikelihoodEstimate) -> np.ndarray:
    diag = np.diagonal(est.cov, axis1=-2, axis2=-1)
    if np.any(diag < 0):
        raise ValueError("invalid covariance")
    return np.sqrt(diag)


def adjusted_mean(est: SyntheticLikelihoodEstimate, gamma) -> np.ndarray:
    """mu_hat + sqrt(diag(Sigma_hat)) * gamma."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[-1] != est.d:
        raise ValueError("gamma length does not match summary dimension")
    return est.mean + _scales(est) * gamma


def adjusted_variance(est: SyntheticLikelihoodEstimate, gamma) -> np.ndarray:
    """Sigma_hat + diag(diag(Sigma_hat) * gamma**2)."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[-1] != est.d:
        raise ValueError("gamma length does not match summary dimension")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    diag = _scales(est) ** 2
    extra = diag * gamma**2
    return est.cov + extra[..., :, None] * np.eye(est.d)


def gaussian_log_density(x, mean, chol, logdet) -> np.ndarray:
    """log N(x; mean, L L^T) from a lower Cholesky factor L and log|L L^T|."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    d = chol.shape[-1]
    if x.shape[-1] != d or mean.shape[-1] != d:
        raise ValueError("dimension mismatch")
    diff = x - mean
    diff, chol = np.broadcast_arrays(diff[..., :, None], chol)
    z = np.linalg.solve(chol, diff[..., :1])[..., 0]
    return -0.5 * d * LOG_2PI - 0.5 * np.asarray(logdet) - 0.5 * np.sum(z * z, axis=-1)


def _cho_inv(chol: np.ndarray) -> np.ndarray:
    d = chol.shape[-1]
    linv = np.linalg.solve(chol, np.broadcast_to(np.eye(d), chol.shape))
    return np.swapaxes(linv, -1, -2) @ linv


def gamma_posterior(est: SyntheticLikelihoodEstimate, s_obs, sigma0: float) -> GammaPosterior:
    """Gaussian conditional posterior of the mean-adjustment vector.

    Under the prior N(0, sigma0^2 I) and the mean-adjusted synthetic
    likelihood, Gamma | theta, s_obs is Gaussian with
    cov = (I / sigma0^2 + D P D)^-1 and mean = cov D P (s_obs - mu_hat),
    where D = diag(Sigma_hat)^(1/2) and P = Sigma_hat^-1.
    """
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    dscale = _scales(est)
    if np.any(dscale == 0):
        raise DegenerateCovarianceError("degenerate covariance")
    prec = _cho_inv(est.chol)
    d = est.d
    a = dscale[..., :, None] * prec * dscale[..., None, :]
    post_prec = a + np.eye(d) / sigma0**2
    post_prec = 0.5 * (post_prec + np.swapaxes(post_prec, -1, -2))
    lp = np.linalg.cholesky(post_prec)
    cov = _cho_inv(lp)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    resid = np.asarray(s_obs, dtype=float) - est.mean
    rhs = dscale * np.einsum("...ij,...j->...i", prec, resid)
    mean = np.einsum("...ij,...j->...i", cov, rhs)
    return GammaPosterior(mean=mean, cov=cov)


def synthetic_log_lik(method: str, est: SyntheticLikelihoodEstimate, s_obs, gamma=None) -> np.ndarray:
    """Gaussian synthetic log-likelihood of ``s_obs`` under BSL, rBSL-M or rBSL-V."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "BSL":
        return gaussian_log_density(s_obs, est.mean, est.chol, est.logdet)
    if gamma is None:
        raise ValueError(f"{method} requires gamma")
    if method == "rBSL-M":
        return gaussian_log_density(s_obs, adjusted_mean(est, gamma), est.chol, est.logdet)
    gamma = np.asarray(gamma, dtype=float)
    if np.all(gamma == 0):
        return gaussian_log_density(s_obs, est.mean, est.chol, est.logdet)
    cov = adjusted_variance(est, gamma) + np.asarray(est.jitter)[..., None, None] * np.eye(est.d)
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return gaussian_log_density(s_obs, est.mean, chol, logdet)


def gamma_log_prior(gamma, prior: GammaPrior) -> np.ndarray:
    """Sum of independent per-component log prior densities; -inf off-support."""
    g = np.asarray(gamma, dtype=float)
    b = prior.scale
    if prior.kind == "gaussian":
        return np.sum(-0.5 * LOG_2PI - np.log(b) - 0.5 * (g / b) ** 2, axis=-1)
    if prior.kind == "laplace":
        return np.sum(-np.log(2.0 * b) - np.abs(g) / b, axis=-1)
    out = np.sum(np.log(b) - b * g, axis=-1)
    return np.where(np.all(g >= 0, axis=-1), out, -np.inf)


def robust_marginal_log_lik(est: SyntheticLikelihoodEstimate, s_obs, sigma0: float) -> np.ndarray:
    """log of the mean-adjusted likelihood with Gamma integrated out under N(0, sigma0^2 I).

    Equals log N(s_obs; mu_hat, Sigma_hat + sigma0^2 diag(Sigma_hat)).
    """
    diag = _scales(est) ** 2
    cov = est.cov + (sigma0**2 * diag)[..., :, None] * np.eye(est.d)
    cov = cov + np.asarray(est.jitter)[..., None, None] * np.eye(est.d)
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return gaussian_log_density(s_obs, est.mean, chol, logdet)


def take(est: SyntheticLikelihoodEstimate, index) -> SyntheticLikelihoodEstimate:
    """Select entries of a batched estimate."""
    return SyntheticLikelihoodEstimate(
        mean=est.mean[index],
        cov=est.cov[index],
        chol=est.chol[index],
        logdet=np.asarray(est.logdet)[index],
        jitter=np.asarray(est.jitter)[index],
    )
