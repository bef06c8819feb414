"""Compare the feedback policy for the integration bound against baselines.

Runs three spirals trainings with Adam: the second-order feedback policy on
t1, the first-order policy, and a fixed bound.  Each writes a metrics CSV
whose t1 column traces the bound's trajectory.

Usage: python scripts/adaptive_horizon.py --out-dir horizon_runs/
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from snopt_kit import trainer as tr
from snopt_kit.cli import write_records_csv


def config(policy: str | None, iterations: int, seed: int) -> tr.ExperimentConfig:
    horizon = tr.HorizonConfig(enabled=policy is not None,
                               policy=policy or "feedback",
                               penalty=0.5, lr=0.3, period=50)
    return tr.ExperimentConfig(iterations=iterations, seed=seed, grid_samples=13,
                               optimizer=tr.OptimizerConfig(kind="adam", lr=1e-2),
                               horizon=horizon)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    for name, policy in (("feedback", "feedback"), ("first_order", "first_order"),
                         ("fixed", None)):
        records = tr.train(config(policy, args.iterations, args.seed))
        path = os.path.join(args.out_dir, f"{name}.csv")
        write_records_csv(path, records, [f"policy {name}"])
        last = records[-1]
        print(f"{name}: final t1 {last.t1:.4f} test acc {last.test_acc:.3f} -> {path}")


if __name__ == "__main__":
    main()
