"""Component ablation and expert masking on the default synthetic benchmark.

    python scripts/ablation.py --seeds 5 [--workers 4] [--out ablation.json]

Prints mean test AUC per model variant (MIL encoder, TGS encoder, experts
only, gate) and, per class, the gate's class AUC with and without that
class's expert masked.
"""
import argparse
import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from gsmoe.data import SyntheticConfig, generate_synthetic
from gsmoe.train import TrainConfig, evaluate_variants, results_to_dict, run_pipeline, with_overrides

VARIANTS = ("mil_encoder", "tgs_encoder", "experts_only", "gate")


def run(job):
    seed, overrides = job
    train, test = generate_synthetic(SyntheticConfig(seed=seed))
    state = run_pipeline(train, with_overrides(TrainConfig(seed=seed), **overrides))
    return results_to_dict(evaluate_variants(state, test, masks=True))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--fusion", choices=["gate", "soft"], default="gate")
    p.add_argument("--no-task-features", action="store_true")
    p.add_argument("--out")
    args = p.parse_args()
    overrides = {"fusion": args.fusion, "use_task_features": not args.no_task_features}
    jobs = [(s, overrides) for s in range(args.seeds)]
    with ProcessPoolExecutor(args.workers) as pool:
        runs = list(pool.map(run, jobs))

    print(f"{'variant':14s} {'AUC':>7s} {'AP':>7s} {'AUC_A':>7s}   (mean over {len(runs)} seeds)")
    for v in VARIANTS:
        m = {k: np.mean([r[v][k] for r in runs]) for k in ("auc", "ap", "auc_a")}
        print(f"{v:14s} {m['auc']:7.4f} {m['ap']:7.4f} {m['auc_a']:7.4f}")
    print("\nclass  unmasked  masked")
    for c in sorted(runs[0]["gate"]["per_class_auc"], key=int):
        un = np.mean([r["gate"]["per_class_auc"][c] for r in runs])
        ma = np.mean([r[f"gate_mask{c}"]["per_class_auc"][c] for r in runs])
        print(f"{c:>5s}  {un:8.4f}  {ma:6.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"overrides": overrides, "runs": runs}, fh, indent=2)


if __name__ == "__main__":
    main()
