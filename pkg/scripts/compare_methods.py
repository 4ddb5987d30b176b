"""Train every method on the same datasets and compare normalized scores.

    python scripts/compare_methods.py --config configs/lg_local3.toml --out runs/compare

Writes one report.json per (method, seed) in the CLI layout, so
``lodada report runs/compare`` can aggregate them afterwards.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from lodada.config import load_config, to_dict
from lodada.experiments import make_datasets, run_experiment
from lodada.policy import METHODS


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[1])
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    p.add_argument("--out", default="runs/compare")
    args = p.parse_args()

    cfg = load_config(args.config)
    scores = {m: [] for m in args.methods}
    for seed in args.seeds or cfg.seeds:
        ds = make_datasets(cfg, seed)
        for method in args.methods:
            result, _ = run_experiment(cfg, seed, method, ds)
            rep = result.report
            rep["provenance"] = {"config": to_dict(cfg), "seed": seed, "method": method}
            path = Path(args.out) / method / f"seed_{seed}" / "report.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
            score = rep["evaluation"]["normalized_score"]
            scores[method].append(score)
            line = f"seed {seed} {method:<16} score {score:7.2f}"
            if "admission_by_group" in rep and method == "lodada":
                ab = rep["admission_by_group"]
                lift = np.subtract(ab["admitted_fraction"], ab["raw_fraction"])
                line += f"  admission lift by group {np.round(lift, 3).tolist()}"
            print(line, flush=True)
    for method, vals in scores.items():
        print(f"{method:<16} mean {np.mean(vals):7.2f}  std {np.std(vals, ddof=1) if len(vals) > 1 else 0:.2f}")


if __name__ == "__main__":
    main()
