"""Run every config in configs/ through the CLI and print one line per experiment.

    python scripts/run_all.py --out results --threads 1
"""
import argparse
import json
import time
from pathlib import Path

from rwre_lab.cli import main

ROOT = Path(__file__).resolve().parents[1]


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--configs", type=Path, default=ROOT / "configs")
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    return ap.parse_args()


def run():
    args = parse_args()
    summary = []
    for cfg in sorted(args.configs.glob("*.json")):
        if args.only and cfg.stem not in args.only:
            continue
        exp = json.loads(cfg.read_text())["experiment"]
        t0 = time.perf_counter()
        code = main([exp, "--config", str(cfg), "--out", str(args.out / cfg.stem), "--threads", str(args.threads)])
        summary.append((cfg.stem, code, time.perf_counter() - t0))
    print()
    for stem, code, secs in summary:
        status = {0: "ok", 1: "config error", 2: "check failed"}[code]
        print(f"{stem:24s} {status:14s} {secs:8.1f}s")


if __name__ == "__main__":
    run()
