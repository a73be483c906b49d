"""Benchmark simulators and their summary statistics.

Each simulator works with a natural parameter vector (the model's own
parameterization) and an unconstrained working vector used by VB and MCMC.
``simulate_summaries`` is the hot path: it draws many datasets at one
parameter value in a single vectorized call.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, logit, ndtri

QUANTILE_METHOD = "linear"  # type-7 interpolation of order statistics


class DegenerateSampleError(ValueError):
    pass


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------- alpha-stable

def stable_rvs(alpha, beta, gamma, delta, size, rng):
    """Chambers-Mallows-Stuck draws from S(alpha, beta, gamma, delta), alpha != 1.

    Parameterization: log E exp(itX) = -gamma^a |t|^a (1 - i beta sign(t) tan(pi a / 2)) + i delta t.
    At alpha = 2 this is N(delta, 2 gamma^2).
    """
    if not (1.0 < alpha <= 2.0):
        raise ParameterError("alpha must lie in (1, 2]")
    v = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size)
    w = rng.standard_exponential(size)
    zeta = -beta * np.tan(0.5 * np.pi * alpha)
    xi = np.arctan(-zeta) / alpha
    a = alpha * (v + xi)
    x = (
        (1.0 + zeta * zeta) ** (0.5 / alpha)
        * np.sin(a)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos(v - a) / w) ** ((1.0 - alpha) / alpha)
    )
    return gamma * x + delta


def mcculloch_statistics(data, axis=-1):
    """Quantile-based statistics (v_alpha, v_beta, v_gamma, v_delta) along ``axis``."""
    q05, q25, q50, q75, q95 = np.quantile(
        data, [0.05, 0.25, 0.5, 0.75, 0.95], axis=axis, method=QUANTILE_METHOD
    )
    iqr = q75 - q25
    if np.any(iqr <= 0):
        raise DegenerateSampleError("degenerate sample")
    spread = q95 - q05
    return np.stack([spread / iqr, (q95 + q05 - 2.0 * q50) / spread, iqr, q50], axis=-1)


# --------------------------------------------------------------------- g-and-k

def gnk_quantile(p, theta):
    """g-and-k quantile function with c = 0.8."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    return _gnk_from_z(ndtri(p), theta)


def _gnk_from_z(z, theta):
    a, b, g, k = theta
    # (1 - exp(-g z)) / (1 + exp(-g z)) == tanh(g z / 2)
    return a + b * (1.0 + 0.8 * np.tanh(0.5 * g * z)) * (1.0 + z * z) ** k * z


def octile_statistics(data, axis=-1):
    """(s_A, s_B, s_g, s_k) from the seven octiles along ``axis``."""
    o = np.quantile(data, np.arange(1, 8) / 8.0, axis=axis, method=QUANTILE_METHOD)
    s_a = o[3]
    s_b = o[5] - o[1]
    if np.any(s_b <= 0):
        raise DegenerateSampleError("degenerate sample")
    s_g = (o[6] - o[4] + o[2] - o[0]) / s_b
    s_k = (o[5] + o[1] - 2.0 * o[3]) / s_b
    return np.stack([s_a, s_b, s_g, s_k], axis=-1)


# ----------------------------------------------------------------------- toads

TOAD_LAGS = (1, 2, 4, 8)
RETURN_DISTANCE = 10.0
TOAD_SENTINEL = 0.0


def toads_positions(alpha, gamma, p0, n_days, n_toads, rng, batch=()):
    """Refuge positions, shape batch + (n_days, n_toads); every toad starts at 0.

    Each night a toad either (prob. 1 - p0) settles at its current refuge plus a
    symmetric stable displacement, or (prob. p0) returns to the refuge of a
    uniformly chosen earlier day.
    """
    shape = tuple(batch) + (n_days, n_toads)
    y = np.zeros(shape)
    for day in range(1, n_days):
        step = stable_rvs(alpha, 0.0, gamma, 0.0, shape[:-2] + (n_toads,), rng)
        back = rng.uniform(size=step.shape) < p0
        which = rng.integers(0, day, size=step.shape)
        previous = np.take_along_axis(y, which[..., None, :], axis=-2)[..., 0, :]
        y[..., day, :] = np.where(back, previous, y[..., day - 1, :] + step)
    return y


def toads_statistics(y, with_flags=False):
    """Three statistics per lag in (1, 2, 4, 8): return count, log(median - min)
    and log(max - median) of the non-return displacements.

    Lags with no non-return displacement (or a zero spread) get
    ``TOAD_SENTINEL`` and are flagged as degenerate.
    """
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-2]
    out = []
    flags = []
    for lag in TOAD_LAGS:
        if lag >= y.shape[-2]:
            disp = np.zeros(batch + (0,))
        else:
            disp = np.abs(y[..., lag:, :] - y[..., :-lag, :]).reshape(batch + (-1,))
        returns = np.sum(disp < RETURN_DISTANCE, axis=-1).astype(float)
        far = np.where(disp >= RETURN_DISTANCE, disp, np.nan)
        has = np.any(disp >= RETURN_DISTANCE, axis=-1)
        filled = np.where(has[..., None], far, 0.0) if disp.shape[-1] else np.zeros(batch + (1,))
        with np.errstate(invalid="ignore"):
            lo = np.nanmin(filled, axis=-1)
            mid = np.nanmedian(filled, axis=-1)
            hi = np.nanmax(filled, axis=-1)
        low_gap = np.where(has, mid - lo, 0.0)
        high_gap = np.where(has, hi - mid, 0.0)
        with np.errstate(divide="ignore"):
            s2 = np.where(low_gap > 0, np.log(np.where(low_gap > 0, low_gap, 1.0)), TOAD_SENTINEL)
            s3 = np.where(high_gap > 0, np.log(np.where(high_gap > 0, high_gap, 1.0)), TOAD_SENTINEL)
        flags.append(~(has & (low_gap > 0) & (high_gap > 0)))
        out.extend([returns, s2, s3])
    stats = np.stack(out, axis=-1)
    if with_flags:
        return stats, np.any(np.stack(flags, axis=-1), axis=-1)
    return stats


# -------------------------------------------------------------------- bindings

class Simulator:
    """Uniform interface: simulate / summarize / parameter maps."""

    name = "base"
    param_names: tuple = ()
    theta_true: tuple = ()
    n_obs = 1

    @property
    def p(self) -> int:
        return len(self.param_names)

    d = 0

    def check(self, theta):
        return np.asarray(theta, dtype=float)

    def simulate(self, theta, rng, n=None):
        return self.simulate_batch(theta, 1, rng, n)[0]

    def simulate_batch(self, theta, n_datasets, rng, n=None):
        raise NotImplementedError

    def summarize(self, data):
        raise NotImplementedError

    def simulate_summaries(self, theta, n_datasets, rng):
        """``n_datasets`` summary vectors at natural parameter ``theta``, shape (n_datasets, d)."""
        return self.summarize(self.simulate_batch(theta, n_datasets, rng))

    def constrain(self, w):
        return np.asarray(w, dtype=float)

    def unconstrain(self, theta):
        return np.asarray(theta, dtype=float)


class ToyModel(Simulator):
    """y_i = theta + eps_i with standardized Gamma(1, rate 0.01) errors of variance 4."""

    name = "toy"
    param_names = ("theta",)
    theta_true = (0.0,)
    d = 2

    def __init__(self, n_obs=30, shape=1.0, rate=0.01, sigma2=4.0):
        self.n_obs = n_obs
        self.shape = shape
        self.rate = rate
        self.sigma = float(np.sqrt(sigma2))

    def errors(self, size, rng):
        v = rng.gamma(self.shape, 1.0 / self.rate, size)
        m = self.shape / self.rate
        return self.sigma * (v - m) / np.sqrt(self.shape / self.rate**2)

    def simulate_batch(self, theta, n_datasets, rng, n=None):
        n = self.n_obs if n is None else n
        if n < 2:
            raise ValueError("need n >= 2")
        theta = float(np.ravel(theta)[0])
        return theta + self.errors((n_datasets, n), rng)

    def summarize(self, data):
        data = np.asarray(data, dtype=float)
        return np.stack([data.mean(axis=-1), data.var(axis=-1, ddof=1)], axis=-1)


class AlphaStable(Simulator):
    name = "alpha_stable"
    param_names = ("alpha", "beta", "gamma", "delta")
    theta_true = (1.8, 0.5, 1.0, 0.0)
    d = 4

    def __init__(self, n_obs=200):
        self.n_obs = n_obs

    def check(self, theta):
        a, b, g, _ = theta = np.asarray(theta, dtype=float)
        if not (1.1 < a <= 2.0 and -1.0 < b < 1.0 and g > 0):
            raise ParameterError(f"alpha-stable parameters outside constraints: {theta}")
        return theta

    def simulate_batch(self, theta, n_datasets, rng, n=None):
        n = self.n_obs if n is None else n
        a, b, g, dl = self.check(theta)
        return stable_rvs(a, b, g, dl, (n_datasets, n), rng)

    def summarize(self, data):
        data = np.asarray(data, dtype=float)
        if data.shape[-1] < 20:
            raise ValueError("need at least 20 observations")
        return mcculloch_statistics(data)

    def constrain(self, w):
        w = np.asarray(w, dtype=float)
        return np.stack(
            [1.1 + 0.9 * expit(w[..., 0]), np.tanh(0.5 * w[..., 1]), np.exp(w[..., 2]), w[..., 3]], axis=-1
        )

    def unconstrain(self, theta):
        t = np.asarray(theta, dtype=float)
        return np.stack(
            [
                np.log((t[..., 0] - 1.1) / (2.0 - t[..., 0])),
                np.log((t[..., 1] + 1.0) / (1.0 - t[..., 1])),
                np.log(t[..., 2]),
                t[..., 3],
            ],
            axis=-1,
        )


class GAndK(Simulator):
    name = "gnk"
    param_names = ("A", "B", "g", "k")
    theta_true = (3.0, 1.0, 2.0, 0.5)
    d = 4

    def __init__(self, n_obs=200):
        self.n_obs = n_obs

    def check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not (theta[1] > 0 and theta[3] > -0.5):
            raise ParameterError(f"g-and-k parameters outside constraints: {theta}")
        return theta

    def simulate_batch(self, theta, n_datasets, rng, n=None):
        n = self.n_obs if n is None else n
        theta = self.check(theta)
        u = rng.uniform(size=(n_datasets, n))
        return _gnk_from_z(ndtri(u), theta)

    def summarize(self, data):
        data = np.asarray(data, dtype=float)
        if data.shape[-1] < 8:
            raise ValueError("need at least 8 observations")
        return octile_statistics(data)

    def constrain(self, w):
        w = np.asarray(w, dtype=float)
        return np.stack([w[..., 0], np.exp(w[..., 1]), w[..., 2], np.exp(w[..., 3]) - 0.5], axis=-1)

    def unconstrain(self, theta):
        t = np.asarray(theta, dtype=float)
        return np.stack([t[..., 0], np.log(t[..., 1]), t[..., 2], np.log(t[..., 3] + 0.5)], axis=-1)


class Toads(Simulator):
    name = "toads"
    param_names = ("alpha", "gamma", "p0")
    theta_true = (1.7, 35.0, 0.6)
    d = 12

    def __init__(self, n_days=63, n_toads=66):
        self.n_days = n_days
        self.n_toads = n_toads
        self.n_obs = n_days

    def check(self, theta):
        a, g, p0 = theta = np.asarray(theta, dtype=float)
        if not (1.1 < a < 2.0 and g > 0 and 0.0 < p0 < 1.0):
            raise ParameterError(f"toad parameters outside constraints: {theta}")
        return theta

    def simulate_batch(self, theta, n_datasets, rng, n=None):
        a, g, p0 = self.check(theta)
        n_days = self.n_days if n is None else n
        return toads_positions(a, g, p0, n_days, self.n_toads, rng, batch=(n_datasets,))

    def summarize(self, data):
        return toads_statistics(data)

    def constrain(self, w):
        w = np.asarray(w, dtype=float)
        return np.stack([1.1 + 0.9 * expit(w[..., 0]), np.exp(w[..., 1]), expit(w[..., 2])], axis=-1)

    def unconstrain(self, theta):
        t = np.asarray(theta, dtype=float)
        return np.stack(
            [np.log((t[..., 0] - 1.1) / (2.0 - t[..., 0])), np.log(t[..., 1]), logit(t[..., 2])], axis=-1
        )


SIMULATORS = {cls.name: cls for cls in (ToyModel, AlphaStable, GAndK, Toads)}


def get_simulator(name: str, **options) -> Simulator:
    try:
        cls = SIMULATORS[name]
    except KeyError:
        raise KeyError(f"unknown simulator {name!r}; available: {sorted(SIMULATORS)}") from None
    return cls(**options)
