"""Run the shipped experiment configs one after another.

Usage: python scripts/run_all.py [--configs toy gnk_desk ...] [--workers 1] [--root runs]
"""
import argparse
import logging
import time
from pathlib import Path

from wgbsl import harness

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--configs", nargs="+", default=["toy", "alpha_stable_desk", "gnk_desk"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--root", default="runs", help="parent directory of the run outputs")
    p.add_argument("--methods", help="comma-separated method filter")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    failed = 0
    for name in args.configs:
        config = harness.load_config(CONFIGS / f"{name}.json")
        if args.methods:
            config.methods = [m.strip() for m in args.methods.split(",")]
        out = Path(args.root) / name
        t0 = time.perf_counter()
        res = harness.replicate_and_report(config, workers=args.workers, output=out)
        failed += res["failed"]
        print(f"== {name} ({time.perf_counter() - t0:.0f} s) -> {out}")
        print((out / "summary.csv").read_text(), end="")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
