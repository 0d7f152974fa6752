"""Hard- and easy-task AUC with and without forgetting on the imbalanced mix.

    python3 scripts/forgetfulness.py --seeds 5 --epochs 60 easy_label_noise=0.03

Trailing key=value pairs override SynthSpec fields.
"""

import argparse
import time
from dataclasses import replace

import numpy as np
import yaml

from timl.metatrain import BatchSpec, MetaConfig, finetune, meta_train, predict
from timl.metrics import auc_roc
from timl.models import ModelSpec
from timl.synthbench import SynthSpec, generate

DATA = dict(family="imbalanced_mix", num_tasks=100, points_per_task=60, feature_dim=4, easy_fraction=0.9,
            hard_margin=0.05, hard_label_noise=0.05)


def heldout_auc(state, bundle, lr):
    aucs = []
    for i, task in enumerate(bundle.tasks):
        shots = np.r_[task.positives[:10], task.negatives[:10]]
        rest = np.r_[task.positives[10:], task.negatives[10:]]
        params = finetune(state, task.subset(shots), 10, BatchSpec(10, 10), lr=lr, seed=i)
        query = task.subset(rest)
        aucs.append(auc_roc(predict(state, query, params), query.y))
    return float(np.mean(aucs))


def run_arm(data, seed, epochs, forgetfulness, inner_lr=0.01):
    spec = SynthSpec(seed=seed, **data)
    hard = generate(replace(spec, seed=seed + 1000, rule_seed=seed, easy_fraction=0.0, num_tasks=20, id_prefix="eh"))
    easy = generate(replace(spec, seed=seed + 2000, rule_seed=seed, easy_fraction=1.0, num_tasks=20, id_prefix="ee"))
    cfg = MetaConfig(inner_lr=inner_lr, outer_lr=1e-3, outer_lr_min=1e-4, epochs=epochs, seed=seed,
                     forgetfulness=forgetfulness)
    state = meta_train(cfg, ModelSpec("mlp", 4, (32, 32), output="binary-logit"), generate(spec))
    best = None if state.best is None else state.best.epoch
    return heldout_auc(state, hard, inner_lr), heldout_auc(state, easy, inner_lr), len(state.tracker.forgotten), best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("set", nargs="*", help="SynthSpec overrides as key=value")
    args = p.parse_args()
    data = dict(DATA)
    for item in args.set:
        k, _, v = item.partition("=")
        data[k] = yaml.safe_load(v)
    t0 = time.perf_counter()
    wins = 0
    for seed in range(args.seeds):
        off = run_arm(data, seed, args.epochs, False)
        on = run_arm(data, seed, args.epochs, True)
        wins += on[0] > off[0]
        print(f"seed {seed}: hard {off[0]:.4f} -> {on[0]:.4f} ({on[0] - off[0]:+.4f})  "
              f"easy {off[1]:.4f} -> {on[1]:.4f}  forgotten {on[2]}  best epoch {off[3]}/{on[3]}", flush=True)
    print(f"hard AUC improved in {wins}/{args.seeds} seeds; {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
