"""Train the spirals fixture with each optimizer and dump metrics CSVs.

Usage: python scripts/compare_optimizers.py --out-dir runs/ [--iterations 800]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from snopt_kit import trainer as tr
from snopt_kit.cli import write_records_csv

SETTINGS = {
    "adam": tr.OptimizerConfig(kind="adam", lr=1e-2),
    "sgd": tr.OptimizerConfig(kind="sgd", lr=3e-2),
    "snopt": tr.OptimizerConfig(kind="snopt", lr=3e-2, epsilon=0.05),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    for name, opt in SETTINGS.items():
        cfg = tr.ExperimentConfig(iterations=args.iterations, seed=args.seed,
                                  grid_samples=13, optimizer=opt)
        try:
            records = tr.train(cfg)
        except tr.TrainAbort as exc:
            print(f"{name}: aborted ({exc})")
            continue
        path = os.path.join(args.out_dir, f"{name}.csv")
        write_records_csv(path, records, [f"optimizer {name} lr {opt.lr}"])
        last = records[-1]
        print(f"{name}: final train loss {last.train_loss:.4f} "
              f"acc {last.train_acc:.3f} -> {path}")


if __name__ == "__main__":
    main()
