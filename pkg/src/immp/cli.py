"""Command line entry point: ``immp <experiment> [--config FILE] [--seed S] ...``.

Each run writes ``<out>.csv`` (long format: experiment,group,x,y,yerr)
and ``<out>.json`` (config echo, seed, git commit, wall time, summary
and checks).  With ``--check`` the exit status is 1 when any check fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys

import numpy as np

from .config import load_config
from .errors import IMMPError
from .experiments import EXPERIMENTS, default_config, run_experiment

log = logging.getLogger("immp")


def git_commit():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def write_csv(path, report):
    """Deterministic CSV: rows in report order, floats via repr."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["experiment", "group", "x", "y", "yerr"])
        for g, x, y, e in report.rows:
            w.writerow([report.experiment, g, repr(x), repr(y), repr(e)])


def write_outputs(out, cfg, report, wall_time):
    d = os.path.dirname(out)
    if d:
        os.makedirs(d, exist_ok=True)
    write_csv(out + ".csv", report)
    meta = {
        "experiment": report.experiment,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "git_commit": git_commit(),
        "wall_time_s": wall_time,
        "summary": report.summary,
        "checks": report.checks,
        "passed": report.passed,
    }
    with open(out + ".json", "w") as f:
        json.dump(_jsonable(meta), f, indent=2, sort_keys=True)
    return out + ".csv", out + ".json"


def build_parser():
    ap = argparse.ArgumentParser(prog="immp", description="Penalized constrained Langevin experiments.")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="TOML file overriding the defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path prefix (writes .csv and .json)")
        p.add_argument("--replicas", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--check", action="store_true", help="exit with status 1 if a check fails")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = default_config(args.experiment)
        if args.config:
            cfg = load_config(args.config, cfg)
        cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas, threads=args.threads, output=args.out)
        report, wall = run_experiment(cfg)
    except IMMPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    csv_path, json_path = write_outputs(cfg.output, cfg, report, wall)
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"wrote {csv_path} and {json_path} ({wall:.1f} s)")
    if args.check and not report.passed:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
