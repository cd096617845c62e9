"""Exit times of the band (-N, N) against the slow reflected chain, over a (lambda, n) grid.

Prints lambda^2 E[T~_n] / n from simulation next to lambda^2 E[S_n] / n for
the reflected chain with up-probability (1 - lambda/kappa) / 2 (and for the
mirrored chain with (1 + lambda/kappa) / 2).

    python scripts/exit_time_grid.py --config configs/couple.json --replicas 200
"""
import argparse

from rwre_lab.config import ExperimentConfig
from rwre_lab.coupling import exit_time_cell
from rwre_lab.env import EnvironmentField, PerturbedView
from rwre_lab.rng import derive_key


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/couple.json")
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    ap.add_argument("--n", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--replicas", type=int, default=200)
    return ap.parse_args()


def run():
    args = parse_args()
    cfg = ExperimentConfig.load(args.config)
    dist = cfg.distribution()
    print(f"{'lambda':>8} {'n':>3} {'gap':>5} {'l2 T/n':>10} {'se':>8} {'l2 S/n':>12} {'l2 S_away/n':>12}")
    for lam in args.lambdas:
        view = PerturbedView(EnvironmentField(dist, int(derive_key(cfg.seed, "env", "exit-base"))), lam)
        for n in args.n:
            c = exit_time_cell(view, n, args.replicas, cfg.seed)
            print(f"{lam:8.3f} {n:3d} {c.gap:5d} {c.scaled_T:10.4f} {lam ** 2 * c.se_T / n:8.4f} "
                  f"{c.scaled_S:12.4g} {c.scaled_S_away:12.4g}")


if __name__ == "__main__":
    run()
