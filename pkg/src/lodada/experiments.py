"""Glue between configs, environments, datasets, training and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import envs
from .config import EnvConfig, RunConfig, to_dict
from .data import Dataset, Domain, NormStats, inject_local_perturbation
from .divergence import estimate_divergence
from .localize import assign_source, kmeans_fit
from .policy import PolicyBundle, act, run_lodada
from .seeding import stage_int


def build_env(cfg: EnvConfig) -> envs.Spec:
    if cfg.kind == "gridworld":
        return envs.make_gridworld(cfg.width, cfg.height, cfg.goal, cfg.slip, cfg.goal_reward,
                                   cfg.step_reward, cfg.gamma, cfg.start, cfg.horizon)
    return envs.make_linear_gaussian(cfg.region_variances, cfg.d_s, cfg.radius, cfg.a_scale,
                                     cfg.b_scale, cfg.state_cost, cfg.action_cost, cfg.gamma,
                                     cfg.horizon, cfg.init_low, cfg.init_high, cfg.action_bound,
                                     cfg.layout)


def source_env(cfg: RunConfig, target: envs.Spec) -> envs.Spec:
    """The environment the source data is collected in (before any s' perturbation)."""
    sh = cfg.shift
    if sh.kind == "region_noise":
        if not isinstance(target, envs.LinearGaussianSpec):
            raise ValueError("shift.kind = 'region_noise' needs a linear_gaussian env")
        v = np.asarray(sh.source_region_variances, dtype=np.float64)
        if v.shape[0] != target.region_centroids.shape[0]:
            raise ValueError("shift.source_region_variances needs one entry per region")
        return target.with_noise(envs.isotropic_covs(v, target.d_s))
    if sh.kind == "slip":
        if not isinstance(target, envs.GridworldSpec):
            raise ValueError("shift.kind = 'slip' needs a gridworld env")
        slip = target.slip.copy()
        slip[:, sh.slip_columns_from:] = sh.source_slip
        return envs.GridworldSpec(target.width, target.height, slip, target.reward, target.gamma,
                                  target.goals, target.start, target.horizon)
    return target


def behavior_policy(cfg: RunConfig, spec: envs.Spec) -> envs.Policy:
    if isinstance(spec, envs.GridworldSpec):
        return envs.epsilon_greedy(spec, envs.value_iteration(spec).policy, cfg.data.epsilon)
    K, k = envs.lqr_gain(spec)
    g = cfg.data.behavior_gain
    return envs.linear_feedback(g * K, g * k, cfg.data.behavior_noise, spec.action_bound)


@dataclass(frozen=True, eq=False)
class Datasets:
    source: Dataset
    target: Dataset
    target_spec: envs.Spec
    source_spec: envs.Spec
    group: np.ndarray | None  # perturbation group of each source record


def make_datasets(cfg: RunConfig, seed: int) -> Datasets:
    """Target and source datasets for ``seed``; each draws from its own stream."""
    tar_spec = build_env(cfg.env)
    src_spec = source_env(cfg, tar_spec)
    provenance = {"config": to_dict(cfg), "seed": seed}
    tar_behavior = behavior_policy(cfg, tar_spec)
    src_behavior = behavior_policy(cfg, tar_spec)  # same behavior, different dynamics
    target = envs.generate_dataset(tar_spec, tar_behavior, cfg.data.n_target,
                                   stage_int(seed, "data/target"), Domain.TARGET, "target",
                                   cfg.data.uniform_starts)
    source = envs.generate_dataset(src_spec, src_behavior, cfg.data.n_source,
                                   stage_int(seed, "data/source"), Domain.SOURCE, "source",
                                   cfg.data.uniform_starts)
    group = None
    if cfg.shift.kind == "local_perturbation":
        source = inject_local_perturbation(source, cfg.shift.n_regions,
                                           cfg.shift.group_variances,
                                           stage_int(seed, "data/perturb"))
        group = np.asarray(source.meta["perturbation"]["group"], dtype=np.int64)
    target = target.replace(meta={**target.meta, **provenance})
    source = source.replace(meta={**source.meta, **provenance})
    return Datasets(source, target, tar_spec, src_spec, group)


def actor_policy(bundle: PolicyBundle, norm: NormStats | None = None) -> envs.Policy:
    def policy(s, rng):
        x = s if norm is None else norm.apply(np.asarray(s))
        out = act(bundle, x)[0]
        return int(out) if bundle.discrete else out
    return policy


def evaluate(spec: envs.Spec, policy: envs.Policy, episodes: int, seed: int,
             reference_episodes: int) -> dict:
    """Mean return over ``episodes`` plus its normalised score.

    Reference returns use the same per-episode streams (common random numbers).
    """
    stats = envs.rollout_returns(spec, policy, episodes, seed)
    J_r, J_e = envs.reference_returns(spec, max(reference_episodes, episodes), seed)
    out = stats.to_json()
    out.update({"J_random": J_r, "J_expert": J_e,
                "normalized_score": envs.normalized_score(stats.mean, J_r, J_e)})
    return out


def run_experiment(cfg: RunConfig, seed: int, method: str | None = None,
                   datasets: Datasets | None = None, evaluate_policy: bool = True):
    """Datasets -> training -> evaluation. Returns ``(RunResult, Datasets)``."""
    method = method or cfg.method
    ds = datasets or make_datasets(cfg, seed)
    result = run_lodada(ds.source, ds.target, cfg.lodada(), seed, method)
    report = result.report
    report["task"] = task_name(cfg)
    if ds.group is not None and result.weighted is not None:
        report["admission_by_group"] = admission_by_group(ds.group, result.weighted.source_index)
    if evaluate_policy:
        policy = actor_policy(result.bundle, result.norm)
        report["evaluation"] = evaluate(ds.target_spec, policy, cfg.eval.episodes, cfg.eval.seed,
                                        cfg.eval.reference_episodes)
    return result, ds


def admission_by_group(group: np.ndarray, admitted: np.ndarray) -> dict:
    G = int(group.max()) + 1
    raw = np.bincount(group, minlength=G) / group.shape[0]
    adm_counts = np.bincount(group[admitted], minlength=G)
    adm = adm_counts / max(int(admitted.shape[0]), 1)
    return {"raw_fraction": raw.tolist(), "admitted_fraction": adm.tolist(),
            "admitted_count": adm_counts.tolist()}


def task_name(cfg: RunConfig) -> str:
    sh = cfg.shift
    if sh.kind == "local_perturbation":
        return f"{cfg.env.kind}/local{len(sh.group_variances)}"
    return f"{cfg.env.kind}/{sh.kind}"


def analytic_cluster_kl(source: Dataset, assignment_cluster: np.ndarray, K: int,
                        src_spec: envs.LinearGaussianSpec,
                        tar_spec: envs.LinearGaussianSpec) -> np.ndarray:
    """Mean closed-form transition KL over each cluster's source points (NaN if empty)."""
    kl = envs.analytic_transition_kl(src_spec, tar_spec, source.s, source.a)
    out = np.full(K, math.nan)
    for n in range(K):
        m = assignment_cluster == n
        if m.any():
            out[n] = float(np.mean(kl[m]))
    return out


def ranking_fidelity(cfg: RunConfig, seed: int, datasets: Datasets | None = None) -> dict:
    """Estimated versus closed-form cluster divergence on a region-noise task."""
    if cfg.shift.kind != "region_noise":
        raise ValueError("ranking fidelity needs shift.kind = 'region_noise'")
    ds = datasets or make_datasets(cfg, seed)
    lc = cfg.localize
    model = kmeans_fit(ds.target.s_next, lc.K, seed, lc.max_iters, lc.tol)
    assignment = assign_source(model, ds.source.s_next, lc.delta)
    report = estimate_divergence(model, assignment, ds.target.z(), ds.source.z(),
                                 cfg.classifier, seed)
    analytic = analytic_cluster_kl(ds.source, assignment.cluster, lc.K, ds.source_spec,
                                   ds.target_spec)
    ok = np.isfinite(report.kl) & np.isfinite(analytic)
    return {"seed": seed, "centroids": model.centroids.tolist(),
            "estimated": report.kl.tolist(), "analytic": analytic.tolist(),
            "spearman": float(spearmanr(report.kl[ok], analytic[ok]).statistic)}
