"""Convergence ladders on the reference Brownian path (seed 42, M = 2^20).

Writes one JSON/CSV report pair per (kind, functional) under the output
directory and prints the final-level gap and fitted rate of each.

    python3 scripts/ladder_experiments.py --out runs/ladders
"""

import argparse
from pathlib import Path

from fqv import experiments as ex
from fqv.paths import generate_brownian

RUNS = [
    ("isometry", "square"),
    ("isometry", "x_runint"),
    ("isometry", "cube"),
    ("uniqueness", "x_runint"),
    ("uniqueness", "sin_runint"),
    ("uniqueness", "runint_x2"),
    ("change_of_variable", "cube"),
    ("decomposition", "square"),
    ("decomposition", "cube"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ladders")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    path = generate_brownian(1, 1.0, ex.DEFAULT_M, args.seed)
    for kind, name in RUNS:
        cfg = ex.ExperimentConfig(kind, path={"generator": "brownian", "seed": args.seed}, functional=name)
        rep = ex.run_experiment(cfg, path=path)
        ex.write_report(rep, Path(args.out), f"{kind}-{name}")
        last = rep.rows[-1]
        key = {"isometry": "rel_gap", "uniqueness": "rel_diff", "decomposition": "qv_ratio"}.get(kind, "residual")
        rate = rep.fitted_rate.slope
        print(f"{kind:20s} {name:12s} {key}={last[key]:.3e}  rate={'n/a' if rate is None else f'{rate:.3f}'}"
              f"  {'PASS' if rep.passed else 'FAIL'}")


if __name__ == "__main__":
    main()
