"""Sweep one configuration field and report the mean score per value.

    python scripts/ablation.py --config configs/lg_local3.toml --field localize.K --values 10 30 50 100
    python scripts/ablation.py --config configs/lg_local3.toml --field train.lam --values 0 0.1 0.5 1
"""

import argparse

import numpy as np

from lodada.config import load_config, with_override
from lodada.experiments import make_datasets, run_experiment


def parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[1])
    p.add_argument("--config", required=True)
    p.add_argument("--field", required=True, help="dotted config path, e.g. localize.K")
    p.add_argument("--values", nargs="+", required=True, type=parse_value)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--method", default="lodada")
    args = p.parse_args()

    base = load_config(args.config)
    seeds = args.seeds or base.seeds
    table = np.zeros((len(seeds), len(args.values)))
    for i, seed in enumerate(seeds):
        ds = make_datasets(base, seed)  # datasets do not depend on the swept field
        for j, v in enumerate(args.values):
            cfg = with_override(base, args.field, v)
            result, _ = run_experiment(cfg, seed, args.method, ds)
            table[i, j] = result.report["evaluation"]["normalized_score"]
        best = args.values[int(np.argmax(table[i]))]
        print(f"seed {seed}: " + "  ".join(f"{v}={s:.2f}" for v, s in zip(args.values, table[i]))
              + f"  best {args.field}={best}", flush=True)
    means = table.mean(axis=0)
    print("mean:   " + "  ".join(f"{v}={s:.2f}" for v, s in zip(args.values, means)))


if __name__ == "__main__":
    main()
