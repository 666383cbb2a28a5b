"""Synthetic benchmark: ARLP and Advanced ARLP against persistence and AR(3).

    python scripts/benchmark.py --seeds 0 1 2 --shift 30 --out runs/bench
"""
import argparse
import logging
import time
from pathlib import Path

from gapcast.evaluation import emit_report
from gapcast.experiment import BenchmarkSetup, run_benchmark, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--shift", type=float, default=0.0, help="daily shift in minutes")
    ap.add_argument("--kinds", nargs="+", default=["arlp", "advanced"])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/benchmark")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_threads(1)

    setup = BenchmarkSetup(shift_minutes=args.shift)
    if args.epochs:
        setup.train.max_epochs = args.epochs
    for seed in args.seeds:
        t0 = time.time()
        run = run_benchmark(setup, seed, kinds=tuple(args.kinds))
        losses = {k: h.epoch_train for k, h in run.histories.items()}
        emit_report(list(run.reports.values()), Path(args.out) / f"seed{seed}", setup.grid, losses)
        for name, r in run.reports.items():
            print(f"seed {seed} {name:12s} MAE {r.mae:.4f} RMSE {r.rmse:.4f} MAPE {r.mape:6.2f}%")
        print(f"seed {seed} took {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
