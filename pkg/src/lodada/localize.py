"""K-means over next states and nearest-centroid assignment of source data.

The default pipeline clusters target next states only and then routes each
source transition to its nearest target centroid, rejecting it when it lies
farther than ``delta`` times the mean cluster radius. A cluster's "diameter"
is taken to be its radius: the largest member-to-centroid distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REJECTED = -1


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray  # (K, d)
    labels: np.ndarray  # (N,) cluster of each clustered point
    radii: np.ndarray  # (K,)
    seed: int = 0
    n_iter: int = 0
    inertia_history: tuple[float, ...] = field(default=())

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def mean_radius(self) -> float:
        return float(np.mean(self.radii))

    @property
    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.K)]

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "n_iter": self.n_iter,
            "centroids": self.centroids.tolist(),
            "radii": self.radii.tolist(),
            "mean_radius": self.mean_radius,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, obj: dict, points: np.ndarray | None = None) -> "ClusterModel":
        """Rebuild a model; memberships are recomputed when ``points`` is given."""
        centroids = np.asarray(obj["centroids"], dtype=np.float64)
        radii = np.asarray(obj["radii"], dtype=np.float64)
        labels = np.zeros(0, dtype=np.int64)
        if points is not None:
            labels, _ = nearest_centroid(np.asarray(points, dtype=np.float64), centroids)
        return cls(centroids, labels, radii, int(obj.get("seed", 0)), int(obj.get("n_iter", 0)))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences: slower than the expanded form but free of cancellation
    d = np.empty((X.shape[0], C.shape[0]))
    for k in range(C.shape[0]):
        diff = X - C[k]
        d[:, k] = np.einsum("ij,ij->i", diff, diff)
    return d


def nearest_centroid(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and Euclidean distance to the nearest centroid; ties go to the lower index."""
    d2 = _sq_dists(X, C)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(X.shape[0]), idx])


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centre; fall back to unused indices
            unused = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(unused))
        chosen.append(i)
        d2 = np.minimum(d2, _sq_dists(X, X[i][None, :])[:, 0])
    return X[chosen].copy()


def kmeans_fit(points, K: int, seed: int = 0, max_iters: int = 300,
               tol: float = 1e-8) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding.

    Stops when the largest centroid shift drops below ``tol`` or after
    ``max_iters`` sweeps. An empty cluster is re-seeded at the point farthest
    from its current centroid. Deterministic given ``seed``.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, K, rng)
    history = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, C)
        labels = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(n), labels]
        history.append(float(point_cost.sum()))
        newC = C.copy()
        counts = np.bincount(labels, minlength=K)
        taken: set[int] = set()
        for k in range(K):
            if counts[k] > 0:
                newC[k] = X[labels == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            order = np.argsort(-point_cost, kind="stable")
            i = next(int(j) for j in order if int(j) not in taken)
            taken.add(i)
            newC[k] = X[i]
            point_cost[i] = 0.0
        shift = float(np.max(np.sqrt(np.sum((newC - C) ** 2, axis=1))))
        C = newC
        if shift < tol:
            break
    labels, dist = nearest_centroid(X, C)
    history.append(float(np.sum(dist**2)))
    radii = np.zeros(K)
    np.maximum.at(radii, labels, dist)
    return ClusterModel(C, labels, radii, seed, it, tuple(history))


@dataclass(frozen=True, eq=False)
class SourceAssignment:
    cluster: np.ndarray  # (N_src,) cluster index or REJECTED
    distance: np.ndarray  # (N_src,) distance to the nearest centroid
    threshold: float

    @property
    def accepted(self) -> np.ndarray:
        return self.cluster != REJECTED

    @property
    def n_accepted(self) -> int:
        return int(np.count_nonzero(self.accepted))


def acceptance_threshold(model: ClusterModel, delta: float) -> float:
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if np.isinf(delta):
        return np.inf
    return delta * model.mean_radius


def assign_source(model: ClusterModel, src_next_states, delta: float) -> SourceAssignment:
    """Route each source next state to its nearest centroid if within delta * mean radius."""
    X = np.asarray(src_next_states, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    thr = acceptance_threshold(model, delta)
    idx, dist = nearest_centroid(X, model.centroids)
    cluster = np.where(dist <= thr, idx, REJECTED).astype(np.int64)
    return SourceAssignment(cluster, dist, thr)


def cluster_counts(model: ClusterModel, assignment: SourceAssignment,
                   n_target: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster (N0, N1): accepted source members and clustered target members."""
    if n_target is not None and n_target != model.labels.shape[0]:
        raise ValueError("target size does not match the clustered point count")
    n1 = np.bincount(model.labels, minlength=model.K)
    acc = assignment.cluster[assignment.accepted]
    n0 = np.bincount(acc, minlength=model.K)
    return n0, n1


def union_localize(tar_next, src_next, K: int, delta: float, seed: int = 0,
                   max_iters: int = 300, tol: float = 1e-8):
    """Variant clustering the pooled next states, then applying the same radius rule.

    Returns ``(model_over_target, assignment)`` so that downstream code sees the
    same shapes as the target-only route: ``model.labels`` covers target points.
    """
    tar = np.asarray(tar_next, dtype=np.float64)
    src = np.asarray(src_next, dtype=np.float64)
    pooled = np.vstack([tar, src])
    full = kmeans_fit(pooled, K, seed, max_iters, tol)
    _, dist = nearest_centroid(pooled, full.centroids)
    tar_model = ClusterModel(full.centroids, full.labels[: len(tar)], full.radii, seed,
                             full.n_iter, full.inertia_history)
    thr = acceptance_threshold(full, delta)
    src_lab = full.labels[len(tar):]
    src_dist = dist[len(tar):]
    cluster = np.where(src_dist <= thr, src_lab, REJECTED).astype(np.int64)
    return tar_model, SourceAssignment(cluster, src_dist, thr)
