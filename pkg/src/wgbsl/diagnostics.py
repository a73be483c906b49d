"""Normality diagnostics and error metrics for point estimates."""
import numpy as np


def _whiten(x):
    x = np.asarray(x, dtype=float)
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / x.shape[0]
    chol = np.linalg.cholesky(cov)
    return np.linalg.solve(chol, centred.T).T


def mardia_skewness(x) -> float:
    """Mardia's b_{1,d}: mean of (z_i' S^-1 z_j)^3 over all pairs (biased covariance)."""
    z = _whiten(x)
    g = z @ z.T
    return float(np.mean(g**3))


def mardia_kurtosis(x) -> float:
    """Mardia's b_{2,d}; equals d(d+2) in expectation for Gaussian data."""
    z = _whiten(x)
    return float(np.mean(np.sum(z * z, axis=1) ** 2))


def excess_kurtosis(x) -> float:
    d = np.asarray(x).shape[1]
    return mardia_kurtosis(x) - d * (d + 2)


def squared_error(theta_true, theta_hat) -> float:
    diff = np.asarray(theta_true, float) - np.asarray(theta_hat, float)
    return float(diff @ diff)


def mahalanobis(theta_true, theta_hat, cov) -> float:
    diff = np.atleast_1d(np.asarray(theta_true, float) - np.asarray(theta_hat, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    return float(np.sqrt(diff @ np.linalg.solve(cov, diff)))
