"""Plain IQL on the unshifted gridworld target data against the value-iteration optimum.

    python scripts/backbone.py --config configs/gridworld.toml --steps 20000
"""

import argparse

from lodada import envs
from lodada.config import load_config, with_override
from lodada.experiments import actor_policy, make_datasets, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[1])
    p.add_argument("--config", default="configs/gridworld.toml")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--episodes", type=int, default=200)
    args = p.parse_args()

    cfg = with_override(load_config(args.config), "train.steps", args.steps)
    cfg = with_override(cfg, "shift.kind", "none")
    for seed in args.seeds or cfg.seeds:
        ds = make_datasets(cfg, seed)
        result, _ = run_experiment(cfg, seed, "iql-target-only", ds, evaluate_policy=False)
        spec = ds.target_spec
        J = envs.rollout_returns(spec, actor_policy(result.bundle), args.episodes, cfg.eval.seed)
        J_opt = envs.rollout_returns(spec, envs.expert_policy(spec), args.episodes, cfg.eval.seed)
        print(f"seed {seed}: return {J.mean:.4f}  optimal {J_opt.mean:.4f}  "
              f"ratio {J.mean / J_opt.mean:.3f}")


if __name__ == "__main__":
    main()
