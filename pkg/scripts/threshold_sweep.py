"""Gate AUC as a function of the peak-prominence threshold.

    python scripts/threshold_sweep.py --seeds 3 [--thresholds 0.1,0.15,0.2,0.25,0.3]
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from gsmoe.data import SyntheticConfig, generate_synthetic
from gsmoe.train import TrainConfig, evaluate_variants, run_pipeline


def run(job):
    seed, threshold = job
    train, test = generate_synthetic(SyntheticConfig(seed=seed))
    base = TrainConfig(seed=seed)
    cfg = replace(base, splat=replace(base.splat, prominence_threshold=threshold))
    return evaluate_variants(run_pipeline(train, cfg), test)["gate"].auc


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--thresholds", default="0.1,0.15,0.2,0.25,0.3")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    thresholds = [float(t) for t in args.thresholds.split(",")]
    jobs = [(s, t) for t in thresholds for s in range(args.seeds)]
    with ProcessPoolExecutor(args.workers) as pool:
        aucs = np.array(list(pool.map(run, jobs))).reshape(len(thresholds), args.seeds)
    for t, row in zip(thresholds, aucs):
        print(f"threshold {t:.2f}: gate AUC {row.mean():.4f}  (seeds: {np.round(row, 4).tolist()})")
    means = aucs.mean(axis=1)
    print(f"spread of means: {means.max() - means.min():.4f}")


if __name__ == "__main__":
    main()
