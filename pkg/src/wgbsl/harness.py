"""Experiment orchestration: configs, pilot runs, WG corpora, replicated method comparisons.

Every random draw is addressed by ``(master seed, path)`` through
:mod:`wgbsl.seeding`, so results do not depend on worker count or on the
order in which replicates finish.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import gaussian_kde

from . import diagnostics, mcmc, vb, wgflow
from .likelihood import GaussianPrior, SyntheticLikelihood
from .seeding import derive_seed, stream
from .simulators import SIMULATORS, Simulator, get_simulator
from .wgflow import WGConfig, WGTransform

log = logging.getLogger(__name__)

ALL_METHODS = ("VB-BSL", "VB-rBSL", "MCMC-rBSL", "VB-BSL-WG", "VB-rBSL-WG", "MCMC-rBSL-WG")
GRID_POINTS = 101


# ---------------------------------------------------------------- configuration

@dataclass
class PilotSettings:
    # natural-space point to train WG at; None runs a short VB-BSL pilot
    theta0: Optional[List[float]] = None
    # None runs the pilot under the main VB iteration cap and stopping rule
    max_iter: Optional[int] = None
    # main VB runs start from the pilot's q; False starts them at its mean with sd vb.init_sd
    warm_start: bool = True


@dataclass
class WGSettings:
    M: int = 3000
    split: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)
    flow: WGConfig = field(default_factory=WGConfig)


@dataclass
class ExperimentConfig:
    simulator: str = "toy"
    simulator_options: dict = field(default_factory=dict)
    # natural-space true parameter; None takes the simulator default
    theta_true: Optional[List[float]] = None
    prior_sd: float = 10.0
    methods: List[str] = field(default_factory=lambda: list(ALL_METHODS))
    replicates: int = 10
    seed: int = 0
    output: str = "runs/experiment"
    # draws of q used to report natural-space posterior moments
    posterior_draws: int = 10000
    pilot: PilotSettings = field(default_factory=PilotSettings)
    wg: WGSettings = field(default_factory=WGSettings)
    vb: vb.VBConfig = field(default_factory=vb.VBConfig)
    mcmc: mcmc.MCMCConfig = field(default_factory=mcmc.MCMCConfig)

    def __post_init__(self):
        if self.simulator not in SIMULATORS:
            raise ValueError(f"unknown simulator {self.simulator!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for m in self.methods:
            parse_method(m)

    def make_simulator(self) -> Simulator:
        return get_simulator(self.simulator, **self.simulator_options)

    def true_theta(self) -> np.ndarray:
        sim = self.make_simulator()
        t = sim.theta_true if self.theta_true is None else self.theta_true
        return np.asarray(t, dtype=float)


def _from_dict(cls, data):
    """Build a (possibly nested) config dataclass from plain JSON data."""
    if not isinstance(data, dict):
        raise TypeError(f"{cls.__name__} expects an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _from_dict(type(default), value)
        kwargs[key] = value
    return cls(**kwargs)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_plain(config)


def schema() -> str:
    """Annotated default configuration, printed by ``--print-schema``."""
    doc = config_to_dict(ExperimentConfig())
    notes = {
        "simulator": f"one of {sorted(SIMULATORS)}",
        "simulator_options": "keyword options for the simulator, e.g. {\"n_obs\": 30}",
        "theta_true": "natural-space true parameter (null = simulator default)",
        "prior_sd": "sd of the N(0, sd^2 I) prior on the working parameters",
        "methods": f"subset of {list(ALL_METHODS)}; MCMC-BSL, MCMC-rBSL-V and their -WG forms are also accepted",
        "pilot.theta0": "natural-space WG training point (null = short VB-BSL pilot)",
        "wg.split": "train/validation/test proportions of the WG corpus",
        "mcmc.proposal_scale": "theta random-walk sd (working space); null = pilot posterior sd",
    }
    return json.dumps({"defaults": doc, "notes": notes}, indent=2)


@dataclass(frozen=True)
class MethodSpec:
    label: str
    engine: str  # "VB" or "MCMC"
    sl_method: str  # BSL, rBSL-M or rBSL-V
    wg: bool


def parse_method(label: str) -> MethodSpec:
    parts = label.split("-")
    wg = parts[-1] == "WG"
    if wg:
        parts = parts[:-1]
    if len(parts) < 2 or parts[0] not in ("VB", "MCMC"):
        raise ValueError(f"unknown method label {label!r}")
    core = "-".join(parts[1:])
    sl = {"BSL": "BSL", "rBSL": "rBSL-M", "rBSL-M": "rBSL-M", "rBSL-V": "rBSL-V"}.get(core)
    if sl is None or (parts[0] == "VB" and sl not in vb.VB_METHODS):
        raise ValueError(f"unknown method label {label!r}")
    return MethodSpec(label, parts[0], sl, wg)


# ---------------------------------------------------------------- data and WG

def observed_summaries(config: ExperimentConfig, sim: Optional[Simulator] = None) -> np.ndarray:
    sim = sim or config.make_simulator()
    y = sim.simulate(config.true_theta(), stream(config.seed, "observed"))
    return np.asarray(sim.summarize(y), dtype=float)


def make_prior(config: ExperimentConfig, sim: Simulator) -> GaussianPrior:
    return GaussianPrior.isotropic(sim.p, config.prior_sd)


def split_sizes(M: int, proportions) -> List[int]:
    """Largest-remainder rounding: floor every share, then hand the leftover
    particles to the largest fractional parts (earlier parts win ties)."""
    props = np.asarray(proportions, dtype=float)
    if M < 0 or np.any(props < 0) or props.sum() <= 0:
        raise ValueError("invalid split")
    shares = M * props / props.sum()
    sizes = np.floor(shares + 1e-9).astype(int)
    frac = shares - sizes
    for i in sorted(range(len(props)), key=lambda j: (-round(frac[j], 9), j))[: M - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def generate_wg_corpus(config: ExperimentConfig, theta0, sim: Optional[Simulator] = None):
    """Simulate M summary vectors at natural ``theta0`` and split them (train, validation, test)."""
    sim = sim or config.make_simulator()
    M = config.wg.M
    cloud = sim.simulate_summaries(np.asarray(theta0, dtype=float), M, stream(config.seed, "wg", "corpus"))
    order = stream(config.seed, "wg", "split").permutation(M)
    sizes = split_sizes(M, config.wg.split)
    edges = np.cumsum([0] + sizes)
    return tuple(cloud[order[edges[i]:edges[i + 1]]] for i in range(3))


def run_pilot(config: ExperimentConfig, sim, s_obs, prior):
    """Short VB-BSL run; returns the variational parameters in working space."""
    max_iter = config.vb.max_iter if config.pilot.max_iter is None else config.pilot.max_iter
    cfg = dataclasses.replace(config.vb, method="BSL", max_iter=max_iter)
    lik = SyntheticLikelihood(sim, s_obs, cfg.N)
    lj = vb.LogJoint(lik, prior, "BSL", cfg.sigma0)
    state, _ = vb.optimize(cfg, lj, vb.initial_params(prior, cfg.init_sd), seed=derive_seed(config.seed, "pilot"))
    return state.lam


@dataclass
class Artifacts:
    s_obs: np.ndarray
    pilot_mu: np.ndarray  # working space
    pilot_sd: np.ndarray
    theta0: np.ndarray  # natural space
    pilot_C: Optional[np.ndarray] = None
    transform: Optional[WGTransform] = None
    clouds: Optional[tuple] = None
    wg_trace: Optional[wgflow.TrainingTrace] = None


def prepare(config: ExperimentConfig, need_wg: bool, timings: Optional[dict] = None) -> Artifacts:
    timings = {} if timings is None else timings
    sim = config.make_simulator()
    prior = make_prior(config, sim)
    s_obs = observed_summaries(config, sim)
    t0 = time.perf_counter()
    lam = run_pilot(config, sim, s_obs, prior)
    timings["pilot"] = time.perf_counter() - t0
    pilot_mu = lam.mu.copy()
    pilot_sd = np.sqrt(np.diag(lam.cov))
    if config.pilot.theta0 is not None:
        theta0 = np.asarray(config.pilot.theta0, dtype=float)
    else:
        theta0 = np.asarray(sim.constrain(pilot_mu), dtype=float)
    art = Artifacts(s_obs, pilot_mu, pilot_sd, theta0, pilot_C=lam.C.copy())
    if need_wg:
        t0 = time.perf_counter()
        train, valid, test = generate_wg_corpus(config, theta0, sim)
        seed = derive_seed(config.seed, "wg", "train")
        art.transform, art.wg_trace = wgflow.train(train, valid, config.wg.flow, stream(seed), seed=seed)
        art.clouds = (train, valid, test)
        timings["wg_train"] = time.perf_counter() - t0
    return art


# ---------------------------------------------------------------- single runs

@dataclass
class RunResult:
    method: str
    replicate: int
    seed: int
    status: str
    theta_hat: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    mse: float = math.nan
    l2_error: float = math.nan
    mahalanobis: float = math.nan
    iterations: int = 0
    wall_clock: float = 0.0
    trace: Optional[List[tuple]] = None
    draws: Optional[np.ndarray] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def metrics(theta_true, theta_hat, cov):
    """(squared error, Euclidean error, Mahalanobis distance)."""
    sq = diagnostics.squared_error(theta_true, theta_hat)
    return sq, math.sqrt(sq), diagnostics.mahalanobis(theta_true, theta_hat, cov)


def run_method(label: str, config: ExperimentConfig, art: Artifacts, replicate: int = 0) -> RunResult:
    """One replicate of one method; failures are caught and reported in ``status``."""
    spec = parse_method(label)
    seed = derive_seed(config.seed, "replicate", replicate, label)
    t0 = time.perf_counter()
    try:
        res = _run(spec, config, art, replicate, seed)
    except Exception as err:  # noqa: BLE001 - any pipeline error fails only this replicate
        log.error("%s replicate %d failed: %s", label, replicate, err)
        res = RunResult(label, replicate, seed, f"failed: {type(err).__name__}: {err}")
    res.wall_clock = time.perf_counter() - t0
    log.info("%s replicate %d: %s, mse %.4g, %d iterations, %.0f s",
             label, replicate, res.status, res.mse, res.iterations, res.wall_clock)
    return res


def vb_init(config: ExperimentConfig, art: Artifacts, prior) -> vb.VariationalParams:
    """Starting q for the main VB runs."""
    if config.pilot.warm_start and art.pilot_C is not None:
        return vb.VariationalParams(art.pilot_mu.copy(), art.pilot_C.copy())
    return vb.initial_params(prior, config.vb.init_sd, art.pilot_mu)


def _run(spec: MethodSpec, config, art, replicate, seed) -> RunResult:
    sim = config.make_simulator()
    prior = make_prior(config, sim)
    if spec.wg and art.transform is None:
        raise ValueError("WG method requested without a trained transform")
    transform = art.transform if spec.wg else None
    theta_true = config.true_theta()
    if spec.engine == "VB":
        cfg = dataclasses.replace(config.vb, method=spec.sl_method)
        lik = SyntheticLikelihood(sim, art.s_obs, cfg.N, transform)
        lj = vb.LogJoint(lik, prior, spec.sl_method, cfg.sigma0)
        init = vb_init(config, art, prior)
        state, trace = vb.optimize(cfg, lj, init, seed=seed)
        working = state.lam.sample(stream(seed, "posterior"), config.posterior_draws)
        rows = [(r.iteration, r.lb, r.smoothed_lb, r.alpha, r.patience) for r in trace]
        iters = state.t
    else:
        cfg = config.mcmc
        scale = art.pilot_sd if cfg.proposal_scale is None else cfg.proposal_scale
        cfg = dataclasses.replace(cfg, method=spec.sl_method, proposal_scale=scale)
        lik = SyntheticLikelihood(sim, art.s_obs, cfg.N, transform)
        chain = mcmc.run(cfg, lik, prior, art.pilot_mu, seed=seed)
        working = chain.kept()
        rows = None
        iters = cfg.iterations
    draws = np.asarray(sim.constrain(working), dtype=float).reshape(len(working), -1)
    theta_hat = draws.mean(axis=0)
    cov = np.atleast_2d(np.cov(draws, rowvar=False))
    sq, l2, md = metrics(theta_true, theta_hat, cov)
    if not all(np.isfinite([sq, md])):
        raise FloatingPointError("non-finite metrics")
    return RunResult(spec.label, replicate, seed, "ok", theta_hat, cov, sq, l2, md, iters, trace=rows,
                     draws=draws)


def _task(args):
    label, config, art, r = args
    return run_method(label, config, art, r)


# ---------------------------------------------------------------- reporting

def _fmt(x) -> str:
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_table(results: List[RunResult], p: int) -> str:
    header = ["method", "replicate", "seed", "status", "mse", "l2_error", "mahalanobis", "iterations"]
    header += [f"theta_hat{i}" for i in range(p)] + [f"sd{i}" for i in range(p)]
    rows = []
    for r in results:
        row = [r.method, r.replicate, r.seed, r.status]
        if r.ok:
            row += [_fmt(r.mse), _fmt(r.l2_error), _fmt(r.mahalanobis), r.iterations]
            row += [_fmt(v) for v in r.theta_hat] + [_fmt(v) for v in np.sqrt(np.diag(r.cov))]
        else:
            row += ["nan"] * 3 + [r.iterations] + ["nan"] * (2 * p)
        rows.append(row)
    return _csv_text(header, rows)


def summarize_results(rows: List[dict]) -> str:
    """Mean and standard deviation per method over successful replicates."""
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    out = []
    for m in methods:
        sub = [r for r in rows if r["method"] == m]
        ok = [r for r in sub if r["status"] == "ok"]
        line = [m, len(ok), len(sub) - len(ok)]
        for key in ("mse", "l2_error", "mahalanobis"):
            vals = np.array([float(r[key]) for r in ok])
            if len(vals) == 0:
                line += ["nan", "nan"]
            else:
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                line += [_fmt(vals.mean()), _fmt(sd)]
        line.append(int(len(ok) == 1))
        out.append(line)
    header = ["method", "n_ok", "n_failed", "mse_mean", "mse_sd", "l2_mean", "l2_sd",
              "md_mean", "md_sd", "single_replicate"]
    return _csv_text(header, out)


def read_results(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _posterior_grid(results: List[RunResult], names) -> str:
    rows = []
    for r in results:
        if not r.ok or r.replicate != 0:
            continue
        for i, name in enumerate(names):
            x = r.draws[:, i]
            lo, hi = float(x.min()), float(x.max())
            if not hi > lo:
                continue
            grid = np.linspace(lo, hi, GRID_POINTS)
            dens = gaussian_kde(x)(grid)
            rows += [[r.method, name, _fmt(g), _fmt(v)] for g, v in zip(grid, dens)]
    return _csv_text(["method", "parameter", "value", "density"], rows)


def _lb_traces(results: List[RunResult]) -> str:
    rows = []
    for r in results:
        if r.ok and r.trace:
            rows += [[r.method, r.replicate, t, _fmt(lb), _fmt(s), _fmt(a), pat] for t, lb, s, a, pat in r.trace]
    return _csv_text(["method", "replicate", "iteration", "lb", "smoothed_lb", "alpha", "patience"], rows)


def _cloud_table(art: Artifacts) -> str:
    train, valid, test = art.clouds
    d = test.shape[1]
    rows = []
    for name, cloud in (("train", train), ("validation", valid), ("test", test)):
        mapped = wgflow.transport(art.transform, cloud)
        for raw, wg in zip(cloud, mapped):
            rows.append([name] + [_fmt(v) for v in raw] + [_fmt(v) for v in wg])
    header = ["split"] + [f"raw{j}" for j in range(d)] + [f"wg{j}" for j in range(d)]
    return _csv_text(header, rows)


def _wg_trace_table(trace: wgflow.TrainingTrace) -> str:
    # the last iteration only evaluates the bound, so it has no step size
    eps = list(trace.epsilons) + [math.nan] * (len(trace.lower_bounds) - len(trace.epsilons))
    rows = [
        [k, _fmt(lb), _fmt(s), c, _fmt(e)]
        for k, (lb, s, c, e) in enumerate(zip(trace.lower_bounds, trace.smoothed, trace.components, eps))
    ]
    return _csv_text(["iteration", "lb", "smoothed_lb", "components", "epsilon"], rows)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def replicate_and_report(config: ExperimentConfig, workers: int = 1, output=None) -> Dict:
    """Run every configured method ``config.replicates`` times and write the report.

    Returns a dict with the results and the number of failed replicates.
    """
    out = Path(output or config.output)
    out.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    specs = [parse_method(m) for m in config.methods]
    art = prepare(config, need_wg=any(s.wg for s in specs), timings=timings)

    tasks = [(s.label, config, art, r) for s in specs for r in range(config.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]

    sim = config.make_simulator()
    files: Dict[str, str] = {}
    files["results.csv"] = results_table(results, sim.p)
    files["summary.csv"] = summarize_results(list(csv.DictReader(io.StringIO(files["results.csv"]))))
    files["lb_traces.csv"] = _lb_traces(results)
    files["posterior_grid.csv"] = _posterior_grid(results, sim.param_names)
    files["observed.csv"] = _csv_text([f"s{j}" for j in range(len(art.s_obs))], [[_fmt(v) for v in art.s_obs]])
    if art.transform is not None:
        files["wg_clouds.csv"] = _cloud_table(art)
        files["wg_trace.csv"] = _wg_trace_table(art.wg_trace)
    for name, text in files.items():
        (out / name).write_text(text)
    if art.transform is not None:
        art.transform.save(out / "wg_transform.json")
    for r in results:
        timings[f"{r.method}/{r.replicate}"] = r.wall_clock
    (out / "timings.json").write_text(json.dumps(timings, indent=1))
    (out / "config.json").write_text(json.dumps(config_to_dict(config), indent=1))

    n_failed = sum(not r.ok for r in results)
    listed = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "seed": config.seed,
        "simulator": config.simulator,
        "theta_true": config.true_theta().tolist(),
        "theta0": art.theta0.tolist(),
        "methods": list(config.methods),
        "replicates": config.replicates,
        "failed_replicates": n_failed,
        "files": {name: _sha256(out / name) for name in listed},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return {"results": results, "failed": n_failed, "artifacts": art, "output": out}


def report(output) -> str:
    """Recompute summary.csv from results.csv in an existing run directory."""
    out = Path(output)
    text = summarize_results(read_results(out / "results.csv"))
    (out / "summary.csv").write_text(text)
    return text
