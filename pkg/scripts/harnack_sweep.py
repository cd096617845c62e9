"""Batch maximum of the Harnack ratio as R grows with lambda * R fixed.

    python scripts/harnack_sweep.py --R 4 8 16 --count 100
"""
import argparse

import numpy as np

from rwre_lab.slab import harnack_batch


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--R", type=int, nargs="+", default=[8, 16, 32])
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--lam-times-R", type=float, default=0.3)
    ap.add_argument("--kappa", type=float, default=0.1)
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--seed", type=int, default=4)
    return ap.parse_args()


def run():
    args = parse_args()
    print(f"{'R':>4} {'lambda':>8} {'max':>10} {'median':>10} {'p90':>10}")
    for R in args.R:
        b = harnack_batch(R, args.sigma, args.lam_times_R, args.count, args.seed, kappa=args.kappa)
        q = np.quantile(b.ratios, [0.5, 0.9])
        print(f"{R:4d} {b.lam:8.4f} {b.max_ratio:10.4f} {q[0]:10.4f} {q[1]:10.4f}")


if __name__ == "__main__":
    run()
