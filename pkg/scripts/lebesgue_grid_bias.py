"""Hitting-time crossing counts 4^-n (m(n) - 1) as the sampling grid is refined.

Crossings are detected at the first grid point past the level, so each cell
overshoots by a fraction of a grid step.  The count ratio at fine levels
approaches 1 only as M grows; this script tabulates that drift.
"""

import argparse

from fqv.partitions import lebesgue_sequence, mesh
from fqv.paths import generate_brownian


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--grids", default="16,18,20,22", help="comma-separated log2 grid sizes")
    ap.add_argument("--levels", default="4:9")
    args = ap.parse_args()
    lo, hi = map(int, args.levels.split(":"))
    print("log2M  " + "  ".join(f"n={n:<5d}" for n in range(lo, hi + 1)))
    for e in map(int, args.grids.split(",")):
        path = generate_brownian(1, 1.0, 2 ** e, args.seed)
        seq = lebesgue_sequence(path, lo, hi)
        ratios = [4.0 ** -n * (seq.counts[n] - 1) for n in seq.ns]
        print(f"{e:5d}  " + "  ".join(f"{r:7.3f}" for r in ratios)
              + f"   finest mesh {mesh(seq.finest):.2e}")


if __name__ == "__main__":
    main()
