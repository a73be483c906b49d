"""Collect summary.csv files from several run directories into one table.

Usage: python scripts/compare_runs.py runs/toy runs/gnk_desk ... [--markdown]
"""
import argparse
import csv
from pathlib import Path


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("runs", nargs="+")
    p.add_argument("--markdown", action="store_true")
    args = p.parse_args(argv)
    header = ["run", "method", "n_ok", "mse_mean", "mse_sd", "md_mean", "md_sd"]
    rows = []
    for run in args.runs:
        with open(Path(run) / "summary.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append([Path(run).name] + [r[k] for k in header[1:]])
    if args.markdown:
        print("| " + " | ".join(header) + " |")
        print("|" + "---|" * len(header))
        for r in rows:
            print("| " + " | ".join(r) + " |")
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(r))


if __name__ == "__main__":
    main()
