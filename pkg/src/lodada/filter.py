"""Tiered admission of source data and critic weights.

Clusters are ranked by their KL estimate. The first third (by ceiling) of
the ranking admits ``xi1`` percent of its source points, the second third
``xi2`` and the rest ``xi3``; within a cluster the points with the smallest
pointwise estimate go first. Admitted points get ``d_hat`` normalised to
[-1, 0] over the admitted set and critic weight ``exp(-alpha * d_hat)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import Dataset
from .divergence import DivergenceReport


@dataclass(frozen=True)
class FilterConfig:
    xi1: float = 90.0
    xi2: float = 80.0
    xi3: float = 70.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("xi1", "xi2", "xi3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        if not self.xi1 >= self.xi2 >= self.xi3:
            raise ValueError("admission percentages must satisfy xi1 >= xi2 >= xi3")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def xi(self) -> tuple[float, float, float]:
        return (self.xi1, self.xi2, self.xi3)


def tier_of(j: int, K: int) -> int:
    """Tier (1, 2 or 3) of 1-based rank ``j`` among ``K`` clusters."""
    if K < 1 or not 1 <= j <= K:
        raise ValueError(f"rank {j} outside 1..{K}")
    if j <= -(-K // 3):
        return 1
    if j <= -(-2 * K // 3):
        return 2
    return 3


def admit_count(xi: float, n0: int) -> int:
    """ceil(xi * n0 / 100), computed exactly."""
    return math.ceil(Fraction(repr(float(xi))) * n0 / 100)


@dataclass(frozen=True, eq=False)
class Admission:
    admitted: np.ndarray  # sorted source indices
    per_cluster: dict  # cluster -> admitted indices (ascending d, then index)
    rank: np.ndarray  # (K,) 1-based rank of each cluster
    tier: np.ndarray  # (K,) tier of each cluster


def filter_sources(report: DivergenceReport, config: FilterConfig) -> Admission:
    K = report.K
    rank = np.empty(K, dtype=np.int64)
    rank[report.ranking] = np.arange(1, K + 1)
    tier = np.array([tier_of(int(rank[n]), K) for n in range(K)], dtype=np.int64)
    per_cluster = {}
    for n in range(K):
        idx = np.flatnonzero(report.cluster == n)
        xi = config.xi[tier[n] - 1]
        k = admit_count(xi, idx.shape[0])
        if report.degenerate[n]:
            order = idx  # no estimate; keep record order
        else:
            order = idx[np.lexsort((idx, report.d[idx]))]
        per_cluster[n] = order[:k]
    admitted = np.sort(np.concatenate([per_cluster[n] for n in range(K)] or [np.zeros(0, int)]))
    return Admission(admitted.astype(np.int64), per_cluster, rank, tier)


def normalize_d(d) -> np.ndarray:
    """(d - max) / (max - min); all zeros when max == min."""
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        return d.copy()
    hi, lo = np.max(d), np.min(d)
    if hi == lo:
        return np.zeros_like(d)
    return (d - hi) / (hi - lo)


def critic_weight(d_hat, alpha: float):
    w = np.exp(-alpha * np.asarray(d_hat, dtype=np.float64))
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True, eq=False)
class WeightedDataset:
    source: Dataset | None  # admitted source transitions, record order kept
    target: Dataset
    source_index: np.ndarray  # index of each admitted point in the raw source set
    cluster: np.ndarray
    d: np.ndarray  # NaN for points from degenerate clusters
    d_hat: np.ndarray
    weight: np.ndarray
    tier: np.ndarray  # tier of each admitted point's cluster
    provenance: dict = field(default_factory=dict)

    @property
    def n_source(self) -> int:
        return int(self.source_index.shape[0])

    def summary(self, n_raw_source: int | None = None) -> dict:
        tiers = {}
        for t in (1, 2, 3):
            m = self.tier == t
            tiers[str(t)] = {"admitted": int(m.sum()),
                             "mean_weight": float(self.weight[m].mean()) if m.any() else None}
        out = {"n_admitted": self.n_source, "n_target": len(self.target), "tiers": tiers}
        if n_raw_source is not None:
            out["n_raw_source"] = int(n_raw_source)
            out["admitted_fraction"] = self.n_source / n_raw_source if n_raw_source else 0.0
        return out

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k in range(self.n_source):
                t = self.source[k]
                d = self.d[k]
                rec = {"s": t.s.tolist(), "a": t.a.tolist(), "r": float(t.r),
                       "s_next": t.s_next.tolist(), "domain": "source",
                       "cluster": int(self.cluster[k]), "d": None if np.isnan(d) else float(d),
                       "d_hat": float(self.d_hat[k]), "weight": float(self.weight[k])}
                fh.write(json.dumps(rec) + "\n")

    def save_summary(self, path, n_raw_source: int | None = None) -> None:
        Path(path).write_text(json.dumps(self.summary(n_raw_source), indent=2, sort_keys=True))


def build_weighted_dataset(source: Dataset, target: Dataset, report: DivergenceReport,
                           config: FilterConfig, provenance: dict | None = None) -> WeightedDataset:
    adm = filter_sources(report, config)
    idx = adm.admitted
    cluster = report.cluster[idx]
    d = report.d[idx]
    finite = ~np.isnan(d)
    d_hat = np.zeros(idx.shape[0])
    d_hat[finite] = normalize_d(d[finite])
    weight = critic_weight(d_hat, config.alpha) if idx.size else np.zeros(0)
    tier = adm.tier[cluster] if idx.size else np.zeros(0, dtype=np.int64)
    sub = source.subset(idx) if idx.size else None
    return WeightedDataset(sub, target, idx, cluster, d, d_hat, np.atleast_1d(weight), tier,
                           dict(provenance or {}))
