"""Wasserstein Gaussianization of summary statistics.

Particles are pushed along the Wasserstein gradient flow of KL(mu || N(0, I)).
At every iteration the particle density is estimated with a Gaussian mixture
and each particle takes the explicit step

    x <- x + eps * (-x - grad log mu(x)),

which leaves a standard-normal cloud where it is.  The composition of all
steps (after a per-coordinate standardization) is the learned transform.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from . import gmm
from .gmm import EMConfig, GaussianMixture
from .slcore import LOG_2PI, SyntheticLikelihoodEstimate, sample_moments

log = logging.getLogger(__name__)

FORMAT_VERSION = "wgbsl-transform/1"


class FlowDivergedError(RuntimeError):
    def __init__(self, step: int, message: str = "flow diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class TransformOverflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FlowStep:
    mixture: GaussianMixture
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("step size must be positive")


@dataclass
class WGConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    window: int = 10
    patience: int = 20
    # smoothed lower bound must beat the best value by this much to reset patience
    min_delta: float = 1e-3
    candidates: Sequence[int] = (1, 2, 3, 5, 8)
    reselect_every: int = 25
    max_halvings: int = 5
    # component variances are floored at stability * epsilon (standardized units) so
    # that no mixture component is narrow enough to make the explicit step overshoot
    stability: float = 1.0
    restore_best: bool = True
    # weight of a broad component (cloud covariance + I) mixed into every fit, so
    # that far from the training particles the velocity points back inwards
    defensive_weight: float = 1e-3
    em: EMConfig = field(default_factory=EMConfig)

    def em_config(self) -> EMConfig:
        floor = max(self.em.cov_floor, self.stability * self.epsilon)
        return EMConfig(self.em.tol, self.em.max_iter, self.em.restarts, floor)


@dataclass
class WGTransform:
    """Standardize, then apply every flow step in training order."""

    shift: np.ndarray
    scale: np.ndarray
    steps: List[FlowStep] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.shift.shape[0]

    @classmethod
    def identity(cls, d: int) -> "WGTransform":
        return cls(np.zeros(d), np.ones(d), [])

    def standardize(self, s) -> np.ndarray:
        # overflow is reported by apply() as TransformOverflowError
        with np.errstate(over="ignore"):
            return (np.asarray(s, dtype=float) - self.shift) / self.scale

    def __call__(self, s) -> np.ndarray:
        return apply(self, s)

    def save(self, path) -> None:
        Path(path).write_text(dumps(self))

    @classmethod
    def load(cls, path) -> "WGTransform":
        return loads(Path(path).read_text())


def velocity(mix: GaussianMixture, x) -> np.ndarray:
    """grad log N(x; 0, I) - grad log mu(x) = -x - grad log mu(x)."""
    x = np.asarray(x, dtype=float)
    return -x - gmm.grad_log_density(mix, x)


def flow_step(cloud, mix: GaussianMixture, epsilon: float, step: int = 0) -> np.ndarray:
    """Move every particle by ``epsilon * velocity``."""
    if not epsilon > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(cloud, dtype=float)
    out = x + epsilon * velocity(mix, x)
    if not np.all(np.isfinite(out)):
        raise FlowDivergedError(step)
    return out


def wg_lower_bound(mix: GaussianMixture, validation) -> float:
    """Average of -|s|^2 / 2 - log mu(s) over validation particles.

    Reaches (d/2) log(2 pi) when mu is the standard normal.
    """
    v = np.atleast_2d(np.asarray(validation, dtype=float))
    if v.shape[0] == 0:
        raise ValueError("empty validation cloud")
    return float(np.mean(-0.5 * np.sum(v * v, axis=1) - gmm.log_density(mix, v)))


def apply(transform: WGTransform, s) -> np.ndarray:
    """Map summary vectors (shape (..., d)) through the transform."""
    x = transport(transform, s)
    if not np.all(np.isfinite(x)):
        raise TransformOverflowError("transform overflow")
    return x


def transport(transform: WGTransform, s) -> np.ndarray:
    """Like :func:`apply` but without the finiteness check."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != transform.d:
        raise ValueError("dimension mismatch")
    x = transform.standardize(s)
    for step in transform.steps:
        x = x + step.epsilon * velocity(step.mixture, x)
    return x


def wg_moments(transform: WGTransform, summaries) -> SyntheticLikelihoodEstimate:
    """Sample moments of transformed summaries, shape (..., N, d)."""
    s = np.asarray(summaries, dtype=float)
    if s.shape[-2] < 2:
        raise ValueError("need at least two summaries")
    return sample_moments(apply(transform, s))


@dataclass
class TrainingTrace:
    lower_bounds: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)
    components: List[int] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)


def with_defensive(mix: GaussianMixture, cloud, weight: float) -> GaussianMixture:
    """Mix a broad Gaussian (mean and covariance + I of ``cloud``) into ``mix``."""
    if weight <= 0:
        return mix
    x = np.asarray(cloud, dtype=float)
    d = x.shape[1]
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + np.eye(d)
    return GaussianMixture(
        np.append((1.0 - weight) * mix.weights, weight),
        np.vstack([mix.means, x.mean(axis=0)]),
        np.concatenate([mix.chols, np.linalg.cholesky(cov)[None]]),
    )


def train(train_cloud, validation, config: WGConfig = WGConfig(), rng=None, seed=None):
    """Learn a Gaussianizing transform from a training cloud.

    Returns ``(transform, trace)``.  The validation cloud is transported with
    the training particles and only used for the lower bound that drives
    stopping and for choosing the number of mixture components.
    """
    x = np.asarray(train_cloud, dtype=float)
    v = np.asarray(validation, dtype=float)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("empty validation cloud")
    if x.ndim != 2 or x.shape[1] != v.shape[1]:
        raise ValueError("training and validation clouds must share the dimension")
    if rng is None:
        rng = np.random.default_rng(seed)

    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    if np.any(scale <= 0):
        raise ValueError("constant summary coordinate in training cloud")
    transform = WGTransform(shift, scale)
    x = transform.standardize(x)
    v = transform.standardize(v)

    trace = TrainingTrace()
    em = config.em_config()
    eps = config.epsilon
    best = -np.inf
    best_steps = 0
    waiting = 0
    n_comp = None
    fitted = None
    for k in range(config.max_iters):
        if n_comp is None or k % config.reselect_every == 0:
            n_comp, res, _ = gmm.select_components(x, v, config.candidates, em, rng)
        else:
            res = gmm.fit(x, n_comp, em, rng, init=fitted)
        fitted = res.mixture
        mix = with_defensive(fitted, x, config.defensive_weight)
        lb = wg_lower_bound(mix, v)
        trace.lower_bounds.append(lb)
        trace.components.append(n_comp)
        smoothed = float(np.mean(trace.lower_bounds[-config.window:]))
        trace.smoothed.append(smoothed)
        if smoothed > best + config.min_delta:
            best = smoothed
            best_steps = k
            waiting = 0
        else:
            waiting += 1
            if waiting >= config.patience:
                break

        for _ in range(config.max_halvings + 1):
            try:
                nx = flow_step(x, mix, eps, step=k)
                nv = flow_step(v, mix, eps, step=k)
                break
            except FlowDivergedError:
                eps *= 0.5
                log.warning("flow diverged at step %d, halving step size to %g", k, eps)
        else:
            raise FlowDivergedError(k)
        x, v = nx, nv
        transform.steps.append(FlowStep(mix, eps))
        trace.epsilons.append(eps)

    # steps taken while waiting out the patience barely move the cloud, so the
    # transform keeps only those up to the best smoothed bound
    if config.restore_best:
        del transform.steps[best_steps:]
    transform.metadata.update(
        seed=seed,
        iterations=len(trace.lower_bounds),
        n_steps=len(transform.steps),
        final_lb=trace.lower_bounds[len(transform.steps)],
        final_smoothed_lb=trace.smoothed[len(transform.steps)],
        lb_trace=list(trace.lower_bounds),
    )
    log.info(
        "WG training: %d steps kept, LB %.4f (target %.4f)",
        len(transform.steps), transform.metadata["final_lb"], 0.5 * x.shape[1] * LOG_2PI,
    )
    return transform, trace


def _mixture_record(mix: GaussianMixture) -> dict:
    return {
        "weights": mix.weights.tolist(),
        "means": mix.means.tolist(),
        "chols": [c.ravel().tolist() for c in mix.chols],
    }


def _mixture_from_record(rec: dict, d: int) -> GaussianMixture:
    w = np.array(rec["weights"], dtype=float)
    return GaussianMixture(
        w,
        np.array(rec["means"], dtype=float).reshape(len(w), d),
        np.array(rec["chols"], dtype=float).reshape(len(w), d, d),
    )


def dumps(transform: WGTransform) -> str:
    """Text serialization; floats are written with round-trip precision."""
    doc = {
        "format": FORMAT_VERSION,
        "d": transform.d,
        "standardizer": {"shift": transform.shift.tolist(), "scale": transform.scale.tolist()},
        "steps": [
            {"epsilon": st.epsilon, "mixture": _mixture_record(st.mixture)} for st in transform.steps
        ],
        "metadata": transform.metadata,
    }
    return json.dumps(doc, indent=1)


def loads(text: str) -> WGTransform:
    doc = json.loads(text)
    if doc.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported transform format {doc.get('format')!r}")
    d = int(doc["d"])
    steps = [
        FlowStep(_mixture_from_record(st["mixture"], d), float(st["epsilon"])) for st in doc["steps"]
    ]
    std = doc["standardizer"]
    return WGTransform(
        np.array(std["shift"], dtype=float),
        np.array(std["scale"], dtype=float),
        steps,
        doc.get("metadata", {}),
    )
