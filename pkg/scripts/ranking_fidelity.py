"""Rank agreement between estimated and closed-form cluster divergences.

    python scripts/ranking_fidelity.py --config configs/lg_ranking.toml
"""

import argparse
import json
from pathlib import Path

import numpy as np

from lodada.config import load_config
from lodada.experiments import ranking_fidelity


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[1])
    p.add_argument("--config", default="configs/lg_ranking.toml")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", help="optional JSON file for the per-seed results")
    args = p.parse_args()

    cfg = load_config(args.config)
    results = []
    for seed in args.seeds or cfg.seeds:
        res = ranking_fidelity(cfg, seed)
        results.append(res)
        order = np.argsort([c[0] for c in res["centroids"]])
        est = np.round(np.asarray(res["estimated"])[order], 3)
        ana = np.round(np.asarray(res["analytic"])[order], 3)
        print(f"seed {seed}: spearman {res['spearman']:+.2f}  estimated {est}  analytic {ana}")
    rho = [r["spearman"] for r in results]
    print(f"mean spearman {np.mean(rho):.3f}, min {np.min(rho):.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
