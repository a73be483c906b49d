"""Command-line entry point: ``wgbsl <subcommand> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, mcmc, vb, wgflow
from .likelihood import SyntheticLikelihood
from .seeding import derive_seed, stream

log = logging.getLogger("wgbsl")


def _load(args) -> harness.ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.output is not None:
        data["output"] = args.output
    if getattr(args, "methods", None):
        data["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "replicates", None) is not None:
        data["replicates"] = args.replicates
    return harness.config_from_dict(data)


def _outdir(config) -> Path:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = _load(args)
    sim = config.make_simulator()
    theta = np.asarray(args.theta, dtype=float) if args.theta else config.true_theta()
    s = sim.simulate_summaries(theta, args.n, stream(config.seed, "simulate"))
    out = _outdir(config) / "summaries.csv"
    header = ",".join(f"s{j}" for j in range(s.shape[1]))
    np.savetxt(out, s, delimiter=",", header=header, comments="", fmt="%.17g")
    print(out)
    return 0


def cmd_wg_train(args) -> int:
    config = _load(args)
    art = harness.prepare(config, need_wg=True)
    out = _outdir(config)
    art.transform.save(out / "wg_transform.json")
    (out / "wg_clouds.csv").write_text(harness._cloud_table(art))
    (out / "wg_trace.csv").write_text(harness._wg_trace_table(art.wg_trace))
    print(f"{len(art.transform.steps)} steps, final LB {art.transform.metadata['final_lb']:.4f}")
    return 0


def _single(args, engine):
    config = _load(args)
    label = args.method
    spec = harness.parse_method(label)
    if spec.engine != engine:
        raise SystemExit(f"{label} is not a {engine} method")
    art = harness.prepare(config, need_wg=spec.wg)
    if spec.wg and args.transform:
        art.transform = wgflow.WGTransform.load(args.transform)
    return config, spec, art


def cmd_vb_run(args) -> int:
    config, spec, art = _single(args, "VB")
    sim = config.make_simulator()
    prior = harness.make_prior(config, sim)
    cfg = dataclasses.replace(config.vb, method=spec.sl_method)
    lik = SyntheticLikelihood(sim, art.s_obs, cfg.N, art.transform if spec.wg else None)
    lj = vb.LogJoint(lik, prior, spec.sl_method, cfg.sigma0)
    seed = derive_seed(config.seed, "replicate", 0, spec.label)
    state, trace = vb.optimize(cfg, lj, harness.vb_init(config, art, prior), seed=seed)
    out = _outdir(config)
    rows = [(r.iteration, r.lb, r.smoothed_lb, r.alpha, r.patience) for r in trace]
    (out / "vb_trace.csv").write_text(
        harness._csv_text(["iteration", "lb", "smoothed_lb", "alpha", "patience"],
                          [[t, repr(lb), repr(s), repr(a), p] for t, lb, s, a, p in rows])
    )
    params = {
        "method": spec.label,
        "seed": seed,
        "mu": state.lam.mu.tolist(),
        "vech_C": state.lam.pack()[sim.p:].tolist(),
        "iterations": state.t,
        "config": harness._to_plain(cfg),
    }
    (out / "vb_params.json").write_text(json.dumps(params, indent=1))
    print(json.dumps({"mu": params["mu"], "natural": sim.constrain(state.lam.mu).tolist()}))
    return 0


def cmd_mcmc_run(args) -> int:
    config, spec, art = _single(args, "MCMC")
    sim = config.make_simulator()
    prior = harness.make_prior(config, sim)
    cfg = config.mcmc
    scale = art.pilot_sd if cfg.proposal_scale is None else cfg.proposal_scale
    cfg = dataclasses.replace(cfg, method=spec.sl_method, proposal_scale=scale)
    lik = SyntheticLikelihood(sim, art.s_obs, cfg.N, art.transform if spec.wg else None)
    chain = mcmc.run(cfg, lik, prior, art.pilot_mu, seed=derive_seed(config.seed, "replicate", 0, spec.label))
    out = _outdir(config)
    chain.to_csv(out / "chain.csv")
    print(f"acceptance {chain.acceptance_rate:.3f}; posterior mean {sim.constrain(chain.kept().mean(0)).tolist()}")
    return 0


def cmd_experiment(args) -> int:
    config = _load(args)
    res = harness.replicate_and_report(config, workers=args.workers)
    print((res["output"] / "summary.csv").read_text(), end="")
    if res["failed"]:
        print(f"{res['failed']} replicate(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    out = args.output or (_load(args).output)
    print(harness.report(out), end="")
    rows = harness.read_results(Path(out) / "results.csv")
    return 1 if any(r["status"] != "ok" for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wgbsl", description="Robust synthetic-likelihood VB with Wasserstein Gaussianization")
    p.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--output", help="output directory")
        return sp

    sp = common(sub.add_parser("simulate", help="simulate summary vectors"))
    sp.add_argument("--theta", type=float, nargs="+", help="natural-space parameter")
    sp.add_argument("-n", type=int, default=1000)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("wg-train", help="train a WG transform"))
    sp.set_defaults(func=cmd_wg_train)

    for name, func, default in (("vb-run", cmd_vb_run, "VB-rBSL-WG"), ("mcmc-run", cmd_mcmc_run, "MCMC-rBSL-WG")):
        sp = common(sub.add_parser(name, help=f"single {name.split('-')[0].upper()} run"))
        sp.add_argument("--method", default=default)
        sp.add_argument("--transform", help="reuse a saved WG transform")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("experiment", help="replicated method comparison"))
    sp.add_argument("--methods", help="comma-separated method filter")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_experiment)

    sp = common(sub.add_parser("report", help="re-aggregate results.csv"))
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.print_schema:
        print(harness.schema())
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
