"""Per-cluster domain classifiers and the KL estimates derived from them.

Inside a cluster, a classifier ``D(z) = P(target | z)`` is fit on pooled
source (label 0) and target (label 1) representations with binary
cross-entropy. Bayes' rule turns its output into a density ratio

    w(z) = (1 - A) D(z) / (A (1 - D(z))),   A = N1 / (N0 + N1),

and ``d = -log w`` evaluated at source points is a pointwise estimate of the
source-to-target KL; its mean over a cluster is the cluster estimate.

Also here: an exact checker for the representation/dynamics KL identity on
finite joint tables, and the Bretagnolle-Huber return-gap bound.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .localize import REJECTED, ClusterModel, SourceAssignment

CLAMP = 1e-6


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (64,)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-4
    input_noise_std: float = 1.0
    min_count: int = 10
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.input_noise_std < 0:
            raise ValueError("input_noise_std must be >= 0")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")


@dataclass(frozen=True, eq=False)
class ClusterClassifier:
    n: int
    params: nn.MlpParams | None
    A: float
    n_source: int
    n_target: int
    z_mean: np.ndarray
    z_std: np.ndarray
    losses: tuple[float, ...] = ()

    @property
    def degenerate(self) -> bool:
        return self.params is None

    def predict(self, z) -> np.ndarray:
        """Clamped P(target | z)."""
        if self.degenerate:
            raise ValueError(f"cluster {self.n} is degenerate and has no classifier")
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        logits = nn.forward(self.params, (z - self.z_mean) / self.z_std)[:, 0]
        return np.clip(nn.sigmoid(logits), CLAMP, 1.0 - CLAMP)


def _bce_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    # mean BCE on logits, computed stably
    loss = np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
    return float(loss), ((nn.sigmoid(logits) - y) / logits.shape[0])[:, None]


def train_classifier(z_target, z_source, config: ClassifierConfig = ClassifierConfig(),
                     seed: int = 0, n: int = 0) -> ClusterClassifier:
    """Fit D(z) = P(target | z) by mini-batch Adam on the pooled cross-entropy.

    Gaussian noise of std ``input_noise_std`` (in standardized units) is added
    to each training batch. Training stops after ``epochs`` or when the clean
    full-data loss has not improved by ``min_delta`` for ``patience`` epochs.
    Clusters with fewer than ``min_count`` samples of either class come back
    degenerate (``params is None``).
    """
    zt = np.atleast_2d(np.asarray(z_target, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(z_source, dtype=np.float64))
    n1, n0 = zt.shape[0], zs.shape[0]
    d = zt.shape[1] if n1 else zs.shape[1]
    A = n1 / (n0 + n1) if n0 + n1 else float("nan")
    if n1 < config.min_count or n0 < config.min_count:
        return ClusterClassifier(n, None, A, n0, n1, np.zeros(d), np.ones(d))
    X = np.vstack([zt, zs])
    y = np.concatenate([np.ones(n1), np.zeros(n0)])
    if config.standardize:
        mean, std = X.mean(axis=0), np.maximum(X.std(axis=0), 1e-6)
    else:
        mean, std = np.zeros(d), np.ones(d)
    Xn = (X - mean) / std
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, 0xC1A5]))
    params = nn.init_mlp(d, config.hidden, 1, rng)
    opt = nn.adam_init(params, lr=config.lr)
    N = Xn.shape[0]
    best, stale, losses = math.inf, 0, []
    for _ in range(config.epochs):
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = Xn[idx]
            if config.input_noise_std > 0:
                xb = xb + config.input_noise_std * rng.standard_normal(xb.shape)
            logits, cache = nn.forward_cached(params, xb)
            _, g = _bce_grad(logits[:, 0], y[idx])
            grads, _ = nn.backprop(params, cache, g)
            opt, params = nn.optimizer_step(opt, params, grads)
        loss, _ = _bce_grad(nn.forward(params, Xn)[:, 0], y)
        losses.append(loss)
        if loss < best - config.min_delta:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return ClusterClassifier(n, params, A, n0, n1, mean, std, tuple(losses))


def density_ratio(D_out, A: float):
    """Bayes inversion of a classifier output; inputs are clamped away from 0 and 1."""
    D = np.clip(np.asarray(D_out, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    w = (1.0 - A) * D / (A * (1.0 - D))
    return float(w) if w.ndim == 0 else w


def pointwise_kl(z, classifier: ClusterClassifier):
    """d = -log w(z); smaller means more target-consistent."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    d = -np.log(density_ratio(classifier.predict(z), classifier.A))
    return float(d[0]) if single else d


def cluster_kl(classifier: ClusterClassifier, source_points) -> float:
    """Mean pointwise estimate over the cluster's source points; +inf when degenerate."""
    pts = np.atleast_2d(np.asarray(source_points, dtype=np.float64))
    if classifier.degenerate or pts.shape[0] == 0:
        return math.inf
    return float(np.mean(pointwise_kl(pts, classifier)))


# ------------------------------------------------------------------ reports


def rank_clusters(kl: np.ndarray) -> np.ndarray:
    """Cluster indices by ascending KL; +inf (degenerate) last, ties by index."""
    kl = np.asarray(kl, dtype=np.float64)
    return np.lexsort((np.arange(kl.shape[0]), kl))


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    kl: np.ndarray  # (K,), +inf for degenerate clusters
    n0: np.ndarray
    n1: np.ndarray
    A: np.ndarray
    degenerate: np.ndarray  # (K,) bool
    cluster: np.ndarray  # (N_src,) cluster or REJECTED
    d: np.ndarray  # (N_src,) pointwise estimate; NaN if rejected or degenerate
    ranking: np.ndarray = field(default=None)
    epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.ranking is None:
            object.__setattr__(self, "ranking", rank_clusters(self.kl))

    @property
    def K(self) -> int:
        return self.kl.shape[0]

    def to_json(self) -> dict:
        clusters = []
        for n in range(self.K):
            clusters.append({
                "n": n,
                "N0": int(self.n0[n]),
                "N1": int(self.n1[n]),
                "A": None if not np.isfinite(self.A[n]) else float(self.A[n]),
                "kl": None if self.degenerate[n] else float(self.kl[n]),
                "degenerate": bool(self.degenerate[n]),
            })
        return {"clusters": clusters, "ranking": [int(i) for i in self.ranking]}

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        if csv_path is not None:
            write_pointwise_csv(self, csv_path)


def write_pointwise_csv(report: DivergenceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "cluster", "d"])
        for i in np.flatnonzero(report.cluster != REJECTED):
            d = report.d[i]
            w.writerow([int(i), int(report.cluster[i]), "" if np.isnan(d) else repr(float(d))])


def estimate_divergence(model: ClusterModel, assignment: SourceAssignment, z_target, z_source,
                        config: ClassifierConfig = ClassifierConfig(),
                        seed: int = 0) -> DivergenceReport:
    """Train one classifier per cluster and assemble the report.

    Clusters are independent; each gets its own RNG stream keyed by
    ``(seed, n)`` so the result does not depend on evaluation order.
    """
    zt = np.asarray(z_target, dtype=np.float64)
    zs = np.asarray(z_source, dtype=np.float64)
    K = model.K
    kl = np.full(K, np.inf)
    A = np.full(K, np.nan)
    n0 = np.zeros(K, dtype=np.int64)
    n1 = np.zeros(K, dtype=np.int64)
    degenerate = np.zeros(K, dtype=bool)
    d = np.full(zs.shape[0], np.nan)
    epochs = []
    for n in range(K):
        t_idx = np.flatnonzero(model.labels == n)
        s_idx = np.flatnonzero(assignment.cluster == n)
        clf = train_classifier(zt[t_idx], zs[s_idx], config, seed, n)
        n0[n], n1[n], A[n] = clf.n_source, clf.n_target, clf.A
        epochs.append(len(clf.losses))
        if clf.degenerate:
            degenerate[n] = True
            continue
        dn = pointwise_kl(zs[s_idx], clf)
        d[s_idx] = dn
        kl[n] = float(np.mean(dn))
    return DivergenceReport(kl, n0, n1, A, degenerate, assignment.cluster.copy(), d,
                            epochs=tuple(epochs))


# ------------------------------------------------------------------- theory


def _check_joint(joint) -> np.ndarray:
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 3:
        raise ValueError("joint must be a 3-D table P[z, s_src, s_tar]")
    if np.any(~np.isfinite(P)) or np.any(P <= 0):
        raise ValueError("joint entries must be finite and strictly positive")
    if abs(P.sum() - 1.0) > 1e-12:
        raise ValueError(f"joint must sum to 1, got {P.sum()!r}")
    return P


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    return float(-np.sum(p * np.log(p)))


@dataclass(frozen=True)
class KlIdentityResult:
    lhs: float
    rhs: float
    gap: float
    conditional_kl: float  # E log P(s_src|z)/P(s_tar|z)
    entropy_gap: float  # H(s_src) - H(s_tar)


def kl_identity_check(joint) -> KlIdentityResult:
    """Exact enumeration of both sides of the representation/dynamics KL identity.

    ``joint[z, i, j] = P(z, s_src = i, s_tar = j)``. The left side is
    E[log P(z|s_src) / P(z|s_tar)], the right side
    E[log P(s_src|z) / P(s_tar|z)] + H(s_src) - H(s_tar), both expectations
    under the joint.
    """
    P = _check_joint(joint)
    p_z = P.sum(axis=(1, 2))
    p_zs = P.sum(axis=2)  # (z, i)
    p_zt = P.sum(axis=1)  # (z, j)
    p_s = P.sum(axis=(0, 2))
    p_t = P.sum(axis=(0, 1))
    z_given_s = p_zs / p_s[None, :]
    z_given_t = p_zt / p_t[None, :]
    s_given_z = p_zs / p_z[:, None]
    t_given_z = p_zt / p_z[:, None]
    lhs = float(np.sum(P * (np.log(z_given_s)[:, :, None] - np.log(z_given_t)[:, None, :])))
    ckl = float(np.sum(P * (np.log(s_given_z)[:, :, None] - np.log(t_given_z)[:, None, :])))
    B = entropy(p_s) - entropy(p_t)
    rhs = ckl + B
    return KlIdentityResult(lhs, rhs, abs(lhs - rhs), ckl, B)


def random_joint(rng: np.random.Generator, shape=(3, 3, 3), concentration: float = 1.0) -> np.ndarray:
    P = rng.gamma(concentration, size=shape) + 1e-3
    return P / P.sum()


@dataclass(frozen=True)
class TheoryInputs:
    B: float  # H(s'_src) - H(s'_tar)
    epsilon: float
    R_max: float = 1.0
    gamma: float = 0.99


def bh_return_gap_bound(inputs: TheoryInputs) -> float:
    """2 R_max sqrt(1 - exp(B - eps))."""
    gap = inputs.epsilon - inputs.B
    if gap < 0 or math.isnan(gap):
        raise ValueError(f"epsilon ({inputs.epsilon}) must be >= B ({inputs.B})")
    return 2.0 * inputs.R_max * math.sqrt(-math.expm1(-gap))
