"""Command-line harness: ``lodada {generate,run,evaluate,report}``.

Layout on disk::

    <data.dir>/seed_<n>/{source,target}.jsonl          # written by generate
    <out>/<method>/seed_<n>/report.json                # written by run
    <out>/<method>/seed_<n>/checkpoint.bin(.json)
    <out>/<method>/results.csv                         # aggregate over seeds

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training error.
The log level comes from ``LODADA_LOG_LEVEL`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import envs, nn
from .config import ConfigError, RunConfig, load_config, to_dict
from .data import DatasetError, NormStats, load_dataset, save_dataset
from .experiments import (Datasets, actor_policy, build_env, evaluate, make_datasets,
                          run_experiment, source_env)
from .policy import METHODS, PolicyBundle, StageError, TrainingError

log = logging.getLogger("lodada")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class DataError(Exception):
    pass


def _seeds(args, cfg: RunConfig) -> list[int]:
    return list(args.seed) if args.seed else list(cfg.seeds)


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _data_dir(cfg: RunConfig, seed: int, override: str | None = None) -> Path:
    return Path(override or cfg.data.dir) / f"seed_{seed}"


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    for seed in _seeds(args, cfg):
        ds = make_datasets(cfg, seed)
        d = _data_dir(cfg, seed, args.out)
        d.mkdir(parents=True, exist_ok=True)
        save_dataset(ds.target, d / "target.jsonl")
        save_dataset(ds.source, d / "source.jsonl")
        log.info("wrote %s", d)
        print(f"seed {seed}: {d / 'source.jsonl'} ({len(ds.source)}), "
              f"{d / 'target.jsonl'} ({len(ds.target)})")
    return EXIT_OK


def _load_datasets(cfg: RunConfig, seed: int) -> Datasets:
    d = _data_dir(cfg, seed)
    paths = {k: d / f"{k}.jsonl" for k in ("source", "target")}
    for p in paths.values():
        if not p.exists():
            raise DataError(f"dataset file not found: {p}")
    try:
        source, target = load_dataset(paths["source"]), load_dataset(paths["target"])
    except DatasetError as exc:
        raise DataError(str(exc)) from exc
    tar_spec = build_env(cfg.env)
    group = source.meta.get("perturbation", {}).get("group")
    return Datasets(source, target, tar_spec, source_env(cfg, tar_spec),
                    None if group is None else np.asarray(group, dtype=np.int64))


def checkpoint_meta(bundle: PolicyBundle, extra: dict) -> dict:
    return {"policy_kind": "actor", "d_s": bundle.d_s, "d_a": bundle.d_a,
            "discrete": bundle.discrete, "action_bound": bundle.action_bound,
            "log_std_min": bundle.log_std_min, "log_std_max": bundle.log_std_max, **extra}


def write_reference_checkpoint(path, kind: str, d_s: int, d_a: int, discrete: bool) -> None:
    """A parameter-free checkpoint standing for the uniform-random or oracle policy."""
    if kind not in ("uniform_random", "oracle"):
        raise ValueError(f"unknown reference policy {kind!r}")
    nn.save_checkpoint(path, {}, {"policy_kind": kind, "d_s": d_s, "d_a": d_a,
                                  "discrete": discrete})


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.method
    out = Path(args.out or cfg.out) / method
    rows = []
    for seed in _seeds(args, cfg):
        ds = _load_datasets(cfg, seed)
        result, _ = run_experiment(cfg, seed, method, ds)
        run_dir = out / f"seed_{seed}"
        report = result.report
        report["provenance"] = {"config": to_dict(cfg), "seed": seed, "method": method}
        _dump(report, run_dir / "report.json")
        nets = {"actor": result.bundle.actor, "V": result.bundle.V, "Q": result.bundle.Q}
        meta = checkpoint_meta(result.bundle, {
            "seed": seed, "method": method, "config": to_dict(cfg),
            "normalization": None if result.norm is None else result.norm.to_json()})
        nn.save_checkpoint(run_dir / "checkpoint.bin", nets, meta)
        score = report["evaluation"]["normalized_score"]
        rows.append((report["task"], method, seed, score))
        print(f"{method} seed {seed}: normalized score {score:.2f} -> {run_dir}")
    table = result_table([{"task": t, "method": m, "seed": s, "score": v} for t, m, s, v in rows])
    write_table(table, out / "results.csv")
    print(format_table(table))
    return EXIT_OK


def _policy_from_checkpoint(path, spec: envs.Spec) -> envs.Policy:
    nets, meta = nn.load_checkpoint(path)
    kind = meta.get("policy_kind", "actor")
    discrete = isinstance(spec, envs.GridworldSpec)
    if meta.get("d_s") != spec.d_s or meta.get("d_a") != spec.d_a:
        raise DataError(f"checkpoint dimensions (d_s={meta.get('d_s')}, d_a={meta.get('d_a')}) "
                        f"do not match the environment (d_s={spec.d_s}, d_a={spec.d_a})")
    if kind == "uniform_random":
        return envs.uniform_random_policy(spec)
    if kind == "oracle":
        return envs.expert_policy(spec)
    actor = nets["actor"]
    bundle = PolicyBundle(None, None, None, actor, None, None, None, 0, spec.d_s, spec.d_a,
                          discrete, meta.get("action_bound"), meta.get("log_std_min", -20.0),
                          meta.get("log_std_max", 2.0))
    norm = meta.get("normalization")
    stats = None
    if norm:
        stats = NormStats(np.asarray(norm["mean"]), np.asarray(norm["std"]))
    return actor_policy(bundle, stats)


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if not args.checkpoint:
        raise ConfigError("checkpoint", "missing required argument --checkpoint")
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    spec = build_env(cfg.env)
    policy = _policy_from_checkpoint(args.checkpoint, spec)
    seed = args.seed[0] if args.seed else cfg.eval.seed
    episodes = args.episodes or cfg.eval.episodes
    res = evaluate(spec, policy, episodes, seed, cfg.eval.reference_episodes)
    res["checkpoint"] = str(args.checkpoint)
    res["seed"] = seed
    if args.out:
        _dump(res, Path(args.out) / "evaluation.json")
    print(json.dumps({k: v for k, v in res.items() if k != "returns"}, indent=2, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ reports


def result_table(rows: list[dict]) -> list[dict]:
    """Mean and sample std of ``score`` per (task, method); std is None below 2 seeds."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["task"], r["method"])].append(float(r["score"]))
    out = []
    for (task, method), vals in sorted(groups.items()):
        v = np.asarray(vals)
        out.append({"task": task, "method": method, "mean": float(v.mean()),
                    "std": float(v.std(ddof=1)) if v.size >= 2 else None, "n": int(v.size)})
    return out


def format_table(table: list[dict]) -> str:
    lines = [f"{'task':<28} {'method':<16} {'score':>18} {'n':>3}"]
    for r in table:
        std = "n/a" if r["std"] is None else f"{r['std']:.2f}"
        lines.append(f"{r['task']:<28} {r['method']:<16} {r['mean']:>9.2f} ± {std:<6} {r['n']:>3}")
    return "\n".join(lines)


def write_table(table: list[dict], path: Path, keys=("task", "method", "mean", "std", "n")) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in table:
            w.writerow(["n/a" if r.get(k) is None else r.get(k) for k in keys])


def collect_reports(paths) -> list[dict]:
    reports = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("report.json"))
        for f in files:
            reports.append(json.loads(f.read_text()))
    if not reports:
        raise DataError(f"no report.json found under {', '.join(map(str, paths))}")
    return reports


def _ablation(reports: list[dict], key: str, getter) -> list[dict]:
    groups = defaultdict(list)
    for r in reports:
        groups[(r["task"], r["method"], getter(r))].append(r["evaluation"]["normalized_score"])
    rows = []
    for (task, method, val), scores in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1],
                                                                              kv[0][2])):
        v = np.asarray(scores)
        rows.append({"task": task, "method": method, key: val, "mean": float(v.mean()),
                     "std": float(v.std(ddof=1)) if v.size >= 2 else None, "n": int(v.size)})
    return rows


def build_report(reports: list[dict], out: Path) -> list[dict]:
    envs_by_task: dict[str, str] = {}
    for r in reports:
        env = json.dumps(r.get("provenance", {}).get("config", {}).get("env"), sort_keys=True)
        if envs_by_task.setdefault(r["task"], env) != env:
            raise DataError(f"reports for task {r['task']!r} come from different environments")
    rows = [{"task": r["task"], "method": r["method"], "seed": r["seed"],
             "score": r["evaluation"]["normalized_score"]} for r in reports]
    table = result_table(rows)
    out.mkdir(parents=True, exist_ok=True)
    write_table(table, out / "results.csv")
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "seed", "step", "v", "q", "actor"])
        for r in reports:
            L = r["train"]["losses"]
            for i, step in enumerate(L["step"]):
                w.writerow([r["task"], r["method"], r["seed"], step, L["v"][i], L["q"][i],
                            L["actor"][i]])
    with open(out / "admission.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "seed", "tier", "admitted", "mean_weight"])
        for r in reports:
            for tier, st in sorted(r.get("filter", {}).get("tiers", {}).items()):
                w.writerow([r["task"], r["method"], r["seed"], tier, st["admitted"],
                            "" if st["mean_weight"] is None else st["mean_weight"]])
    write_table(_ablation(reports, "K", lambda r: r["config"]["localize"]["K"]),
                out / "ablation_K.csv", ("task", "method", "K", "mean", "std", "n"))
    write_table(_ablation(reports, "lam", lambda r: r["config"]["train"]["lam"]),
                out / "ablation_lambda.csv", ("task", "method", "lam", "mean", "std", "n"))
    return table


def cmd_report(args) -> int:
    reports = collect_reports(args.runs)
    out = Path(args.out or "report")
    table = build_report(reports, out)
    print(format_table(table))
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lodada", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate", help="write source/target datasets")
    common(g)
    r = sub.add_parser("run", help="train and evaluate")
    common(r)
    r.add_argument("--method", choices=METHODS)
    e = sub.add_parser("evaluate", help="roll out a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    rep = sub.add_parser("report", help="aggregate run reports into tables")
    rep.add_argument("runs", nargs="+", help="run directories or report files")
    rep.add_argument("--out", help="output directory for CSVs")
    return p


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "evaluate": cmd_evaluate,
            "report": cmd_report}


def main(argv=None) -> int:
    level = os.environ.get("LODADA_LOG_LEVEL", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StageError, TrainingError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
