"""Train and score the full model and both modulator ablations on the synthetic benchmark.

Usage: python3 scripts/desk_benchmark.py [--out artifacts/desk] [--variants full,no_visual] [--force]
"""

import argparse
import logging
import os

from threadpoolctl import threadpool_limits

from modseg.benchmark import VARIANTS, run_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/desk")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--force", action="store_true", help="retrain even if cached results exist")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(int(os.environ.get("MODSEG_THREADS", "1"))):
        results = run_all(args.out, tuple(args.variants.split(",")), args.force)
    for r in results.values():
        print(f"{r.name:11s} J={r.j_mean:.3f} F={r.f_mean:.3f} disamb={r.disambiguation:.3f} "
              f"train={r.train_seconds:.0f}s")


if __name__ == "__main__":
    main()
