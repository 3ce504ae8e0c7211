"""Train the supervised baseline and SSL-DG (plus optional ablations) on domain A, score on domain B.

    python3 scripts/desk_experiment.py --seeds 0 1 2 --steps 300 --variants baseline ssldg no_sba no_une
"""

import argparse
import csv
import time

from ssldg.experiment import VARIANTS, desk_experiment, mean_dice


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--variants", nargs="+", default=["baseline", "ssldg"], choices=sorted(VARIANTS))
    ap.add_argument("--csv", help="write one row per (seed, variant)")
    args = ap.parse_args()

    t0 = time.perf_counter()
    res = desk_experiment(args.seeds, args.variants, args.steps, log=print)
    print(f"total {time.perf_counter() - t0:.0f}s")
    for v in args.variants:
        print(f"{v:<9} mean target Dice {mean_dice(res, v):.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "seed", "dice", "seconds"])
            for r in res:
                w.writerow([r.variant, r.seed, f"{r.dice:.6f}", f"{r.seconds:.1f}"])


if __name__ == "__main__":
    main()
