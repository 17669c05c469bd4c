"""Fit one- and two-compartment models to the same simulated data and compare them by PSIS-LOO.

Usage: python scripts/loo_comparison.py [--out DIR] [--warmup 500] [--sampling 500]
"""
import argparse
import csv
import sys
from pathlib import Path

from bayespk.cli import main

TRUTH = dict(CL=10.0, Q=15.0, VC=35.0, VP=105.0, ka=2.5, sigma=0.22)


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="loo_out")
    ap.add_argument("--chains", type=int, default=4)
    ap.add_argument("--warmup", type=int, default=500)
    ap.add_argument("--sampling", type=int, default=500)
    ap.add_argument("--seed", type=int, default=2)
    a = ap.parse_args()
    out = Path(a.out)
    sim = out / "sim.csv"
    params = [x for k, v in TRUTH.items() for x in ("--param", f"{k}={v}")]
    run("simulate", "--model", "twocpt", "--seed", a.seed, "--out", sim, *params)
    sampler = ["--chains", a.chains, "--warmup", a.warmup, "--sampling", a.sampling, "--seed", a.seed]
    for model in ("twocpt", "onecpt"):
        run("fit", "--model", model, "--data", sim, *sampler, "--out", out / model)
        run("ppc", "--fit", out / model)
    run("loo", "--fit", out / "twocpt", "--fit", out / "onecpt", "--out", out)
    with open(out / "loo_compare.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    diff, se = float(row["elpd_diff"]), float(row["se_diff"])
    print(f"twocpt - onecpt: elpd_diff {diff:.2f}, se {se:.2f}, ratio {diff / se:.1f}")
