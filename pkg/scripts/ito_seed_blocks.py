"""Ito isometry Monte Carlo repeated over disjoint blocks of seeds.

Reports how often |mean_lhs - mean_rhs| exceeds k combined standard errors,
and the pooled estimate over all blocks.
"""

import argparse

from fqv import calculus as calc
from fqv import functionals as fn


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--functional", default="square")
    ap.add_argument("--blocks", type=int, default=20)
    ap.add_argument("--block-size", type=int, default=200)
    ap.add_argument("--level", type=int, default=14)
    ap.add_argument("--grid", type=int, default=2 ** 14)
    ap.add_argument("--k", type=float, default=2.0)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    F = fn.from_spec(args.functional)
    b = args.block_size
    misses = 0
    for i in range(args.blocks):
        mc = calc.ito_isometry_mc(F, range(i * b, (i + 1) * b), args.level, args.grid, workers=args.workers)
        miss = mc.discrepancy > args.k * mc.combined_stderr
        misses += miss
        print(f"seeds {i * b:6d}..{(i + 1) * b - 1:6d}  lhs {mc.mean_lhs:.4f}  rhs {mc.mean_rhs:.4f}  "
              f"|diff|/stderr {mc.discrepancy / mc.combined_stderr:.2f}{'  MISS' if miss else ''}")
    pooled = calc.ito_isometry_mc(F, range(args.blocks * b), args.level, args.grid, workers=args.workers)
    print(f"misses {misses}/{args.blocks}; pooled lhs {pooled.mean_lhs:.4f} +- {pooled.stderr_lhs:.4f}, "
          f"rhs {pooled.mean_rhs:.4f} +- {pooled.stderr_rhs:.4f}")


if __name__ == "__main__":
    main()
