"""Transition datasets, their JSON Lines format, and localized source perturbation.

File format: the first line is a header ``{"d_s": int, "d_a": int, "name": str}``
(optionally with a ``"meta"`` object carrying provenance), then one record
per line::

    {"s": [...], "a": [...], "r": x, "s_next": [...], "domain": "source"}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .localize import kmeans_fit

STD_FLOOR = 1e-6


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DimensionMismatchError(DatasetError):
    def __init__(self, line: int, record: int, msg: str):
        super().__init__(f"line {line} (record {record}): {msg}")
        self.line = line
        self.record = record


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    domain: Domain


def concat(t: Transition) -> np.ndarray:
    """Representation z = s (+) a."""
    return np.concatenate([np.asarray(t.s, dtype=np.float64), np.asarray(t.a, dtype=np.float64)])


def split_representation(z, d_s: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z)
    return z[..., :d_s], z[..., d_s:]


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 0) if arr.size == 0 else arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-stored flat transitions. Arrays are read-only."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    domain: np.ndarray  # str array of Domain values
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "s", _frozen(self.s, 2))
        object.__setattr__(self, "a", _frozen(self.a, 2))
        object.__setattr__(self, "r", _frozen(self.r, 1))
        object.__setattr__(self, "s_next", _frozen(self.s_next, 2))
        dom = np.array([Domain(d).value for d in np.asarray(self.domain).ravel()], dtype="<U6")
        dom.setflags(write=False)
        object.__setattr__(self, "domain", dom)
        n = self.s.shape[0]
        if n == 0:
            raise EmptyDatasetError("dataset has no records")
        for nm in ("a", "r", "s_next", "domain"):
            if getattr(self, nm).shape[0] != n:
                raise DatasetError(f"column {nm!r} has {getattr(self, nm).shape[0]} rows, expected {n}")
        if self.s_next.shape[1] != self.s.shape[1]:
            raise DatasetError("s and s_next dimensions differ")
        for nm in ("s", "a", "r", "s_next"):
            if not np.all(np.isfinite(getattr(self, nm))):
                raise DatasetError(f"column {nm!r} contains non-finite values")

    @classmethod
    def from_transitions(cls, records: Iterable[Transition], name: str = "",
                         meta: dict | None = None) -> "Dataset":
        recs = list(records)
        if not recs:
            raise EmptyDatasetError("dataset has no records")
        return cls(
            np.array([np.asarray(t.s, dtype=np.float64) for t in recs]).reshape(len(recs), -1),
            np.array([np.asarray(t.a, dtype=np.float64) for t in recs]).reshape(len(recs), -1),
            np.array([t.r for t in recs], dtype=np.float64),
            np.array([np.asarray(t.s_next, dtype=np.float64) for t in recs]).reshape(len(recs), -1),
            np.array([Domain(t.domain).value for t in recs]),
            name,
            dict(meta or {}),
        )

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i],
                          Domain(self.domain[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[Transition]:
        return list(self)

    @property
    def d_s(self) -> int:
        return self.s.shape[1]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    def z(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx],
                       self.domain[idx], self.name, dict(self.meta))

    def replace(self, **changes) -> "Dataset":
        fields = dict(s=self.s, a=self.a, r=self.r, s_next=self.s_next, domain=self.domain,
                      name=self.name, meta=dict(self.meta))
        fields.update(changes)
        return Dataset(**fields)

    def relabel(self, domain: Domain | str) -> "Dataset":
        return self.replace(domain=np.full(len(self), Domain(domain).value))

    def same_records(self, other: "Dataset") -> bool:
        return (len(self) == len(other)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("s", "a", "r", "s_next", "domain")))


def merge(datasets: Sequence[Dataset], name: str = "mix") -> Dataset:
    return Dataset(
        np.vstack([d.s for d in datasets]),
        np.vstack([d.a for d in datasets]),
        np.concatenate([d.r for d in datasets]),
        np.vstack([d.s_next for d in datasets]),
        np.concatenate([d.domain for d in datasets]),
        name,
    )


# ----------------------------------------------------------------------- IO


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    header = {"d_s": ds.d_s, "d_a": ds.d_a, "name": ds.name}
    if ds.meta:
        header["meta"] = ds.meta
    lines = [json.dumps(header, sort_keys=True)]
    s, a, r, sn = ds.s.tolist(), ds.a.tolist(), ds.r.tolist(), ds.s_next.tolist()
    for i in range(len(ds)):
        lines.append(json.dumps({"s": s[i], "a": a[i], "r": r[i], "s_next": sn[i],
                                 "domain": str(ds.domain[i])}))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _reject_constant(tok: str):
    raise ValueError(f"non-finite literal {tok}")


def _vector(obj: dict, key: str, line: int) -> list[float]:
    v = obj.get(key)
    if not isinstance(v, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise DatasetParseError(line, f"field {key!r} must be a list of numbers")
    return v


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    header = None
    s, a, r, sn, dom = [], [], [], [], []
    dims: tuple[int, int] | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw, parse_constant=_reject_constant)
            except ValueError as exc:
                raise DatasetParseError(lineno, f"invalid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise DatasetParseError(lineno, "expected a JSON object")
            if header is None:
                if not {"d_s", "d_a"} <= obj.keys():
                    raise DatasetParseError(lineno, "first line must be a header with d_s and d_a")
                header = obj
                dims = (int(obj["d_s"]), int(obj["d_a"]))
                continue
            rec_no = len(s) + 1
            missing = {"s", "a", "r", "s_next", "domain"} - obj.keys()
            if missing:
                raise DatasetParseError(lineno, f"missing fields {sorted(missing)}")
            sv, av, snv = _vector(obj, "s", lineno), _vector(obj, "a", lineno), _vector(obj, "s_next", lineno)
            if not isinstance(obj["r"], (int, float)) or isinstance(obj["r"], bool):
                raise DatasetParseError(lineno, "field 'r' must be a number")
            try:
                d = Domain(obj["domain"])
            except ValueError:
                raise DatasetParseError(lineno, f"unknown domain {obj['domain']!r}") from None
            got = (len(sv), len(av))
            if got != dims or len(snv) != dims[0]:
                raise DimensionMismatchError(
                    lineno, rec_no,
                    f"expected d_s={dims[0]}, d_a={dims[1]}; got len(s)={len(sv)}, "
                    f"len(a)={len(av)}, len(s_next)={len(snv)}")
            s.append(sv)
            a.append(av)
            r.append(float(obj["r"]))
            sn.append(snv)
            dom.append(d.value)
    if header is None or not s:
        raise EmptyDatasetError(f"{path}: no records")
    n = len(s)
    return Dataset(np.array(s, dtype=np.float64).reshape(n, dims[0]),
                   np.array(a, dtype=np.float64).reshape(n, dims[1]),
                   np.array(r), np.array(sn, dtype=np.float64).reshape(n, dims[0]),
                   np.array(dom), str(header.get("name", "")), dict(header.get("meta", {})))


# ------------------------------------------------------------ normalization


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def normalization_stats(*datasets: Dataset) -> NormStats:
    """Per-dimension mean and std over every s and s_next; std floored at 1e-6."""
    if not datasets:
        raise ValueError("need at least one dataset")
    X = np.vstack([np.vstack([d.s, d.s_next]) for d in datasets])
    return NormStats(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    return ds.replace(s=stats.apply(ds.s), s_next=stats.apply(ds.s_next))


# ------------------------------------------------------- local perturbation


def perturbation_groups(ds: Dataset, n_regions: int, n_groups: int,
                        seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Region and group index of every record.

    Regions come from K-means on ``s_next``; they are renumbered by
    lexicographic order of their centroids and dealt to groups round-robin.
    """
    if n_groups < 1:
        raise ValueError("need at least one group")
    if n_regions < n_groups:
        raise ValueError(f"n_regions={n_regions} is smaller than the number of groups ({n_groups})")
    model = kmeans_fit(ds.s_next, n_regions, seed=seed)
    order = np.lexsort(model.centroids.T[::-1])
    rank = np.empty(n_regions, dtype=np.int64)
    rank[order] = np.arange(n_regions)
    region = rank[model.labels]
    return region, region % n_groups


def inject_local_perturbation(ds: Dataset, n_regions: int, group_variances: Sequence[float],
                              seed: int) -> Dataset:
    """Add zero-mean Gaussian noise to ``s_next`` with a per-region-group variance."""
    variances = [float(v) for v in group_variances]
    if not variances:
        raise ValueError("group_variances must be non-empty")
    if any(v < 0 or not math.isfinite(v) for v in variances):
        raise ValueError(f"variances must be finite and >= 0, got {variances}")
    _, group = perturbation_groups(ds, n_regions, len(variances), seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    eps = rng.standard_normal(ds.s_next.shape)
    scale = np.sqrt(np.asarray(variances))[group][:, None]
    meta = dict(ds.meta)
    meta["perturbation"] = {"n_regions": n_regions, "group_variances": variances, "seed": seed,
                            "group": group.tolist()}
    return ds.replace(s_next=ds.s_next + scale * eps, meta=meta)
