"""Class-routed experts versus k-means cluster-routed experts.

    python scripts/clusters.py --seeds 3 [--k 6]

Also reports how well the clusters recover the true classes (purity).
"""
import argparse
from collections import Counter
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from gsmoe.data import SyntheticConfig, generate_synthetic
from gsmoe.train import TrainConfig, evaluate_variants, run_pipeline


def run(job):
    seed, k = job
    train, test = generate_synthetic(SyntheticConfig(seed=seed))
    classes = {r.id: r.class_id for r in train if r.video_label}
    out = {}
    for mode in ("class", "cluster"):
        state = run_pipeline(train, TrainConfig(seed=seed, expert_mode=mode, n_clusters=k))
        out[mode] = evaluate_variants(state, test)["gate"].auc
        if mode == "cluster":
            majority = sum(Counter(classes[v] for v in ids).most_common(1)[0][1]
                           for ids in state.groups.values() if ids)
            out["purity"] = majority / len(classes)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--k", type=int, default=SyntheticConfig().n_classes)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    with ProcessPoolExecutor(args.workers) as pool:
        runs = list(pool.map(run, [(s, args.k) for s in range(args.seeds)]))
    for key in ("class", "cluster", "purity"):
        vals = [r[key] for r in runs]
        print(f"{key:8s} mean {np.mean(vals):.4f}  (seeds: {np.round(vals, 4).tolist()})")


if __name__ == "__main__":
    main()
