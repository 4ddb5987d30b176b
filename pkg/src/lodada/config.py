"""Run configuration: nested dataclasses loaded from TOML.

Schema (all tables optional except ``[env]`` with its ``kind``)::

    method = "lodada"            # lodada | iql-pooled | iql-target-only
    seeds = [0]
    out = "runs"
    normalize = false

    [env]       kind = "gridworld" | "linear_gaussian", geometry, gamma, horizon
    [data]      dataset sizes, behavior-policy knobs, dataset directory
    [shift]     how the source differs: none | local_perturbation | region_noise | slip
    [localize]  K, delta, union
    [classifier] hidden, lr, batch_size, epochs, patience, input_noise_std, min_count
    [filter]    xi1, xi2, xi3, alpha
    [cvae]      hidden, latent_dim, lr, steps, batch_size, M, sigma_b
    [train]     gamma, tau, beta, eta, lam, src_batch, tar_batch, steps, lr, hidden
    [eval]      episodes, seed, reference_episodes

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
dotted field path. Defaults follow the reference hyperparameters; ``"inf"``
is accepted for ``localize.delta``.
"""

from __future__ import annotations

import dataclasses
import math
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ._json import jsonable
from .divergence import ClassifierConfig
from .filter import FilterConfig
from .policy import METHODS, CvaeConfig, LocalizeConfig, LodadaConfig, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass(frozen=True)
class EnvConfig:
    kind: str
    gamma: float = 0.9
    horizon: int = 20
    # gridworld
    width: int = 5
    height: int = 5
    goal: tuple[int, int] = (4, 4)
    start: tuple[int, int] = (0, 0)
    slip: float = 0.1
    goal_reward: float = 1.0
    step_reward: float = 0.0
    # linear-Gaussian
    d_s: int = 2
    radius: float = 2.0
    layout: str = "circle"
    region_variances: tuple[float, ...] = (0.01, 0.01, 0.01, 0.01, 0.01)
    a_scale: float = 1.0
    b_scale: float = 0.5
    state_cost: float = 0.1
    action_cost: float = 0.05
    init_low: float = -3.0
    init_high: float = 3.0
    action_bound: float = 2.0

    def __post_init__(self):
        if self.kind not in ("gridworld", "linear_gaussian"):
            raise ValueError(f"unknown environment kind {self.kind!r}")


@dataclass(frozen=True)
class DataConfig:
    n_target: int = 5000
    n_source: int = 50_000
    dir: str = "data"
    epsilon: float = 0.3  # gridworld behavior: epsilon-greedy around the optimum
    behavior_noise: float = 1.0  # linear-Gaussian behavior: Gaussian exploration std
    behavior_gain: float = 1.0  # scales the expert feedback gain
    uniform_starts: bool = True

    def __post_init__(self):
        if self.n_target < 1 or self.n_source < 1:
            raise ValueError("dataset sizes must be >= 1")


@dataclass(frozen=True)
class ShiftConfig:
    kind: str = "none"
    n_regions: int = 15
    group_variances: tuple[float, ...] = (0.1, 0.5, 2.0)
    source_region_variances: tuple[float, ...] = ()
    source_slip: float = 0.4
    slip_columns_from: int = 0  # slip shift applies to columns >= this index

    def __post_init__(self):
        if self.kind not in ("none", "local_perturbation", "region_noise", "slip"):
            raise ValueError(f"unknown shift kind {self.kind!r}")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    seed: int = 12345
    reference_episodes: int = 200


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    data: DataConfig = field(default_factory=DataConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    method: str = "lodada"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    normalize: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def lodada(self) -> LodadaConfig:
        return LodadaConfig(self.localize, self.classifier, self.filter, self.cvae, self.train,
                            self.normalize)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# ------------------------------------------------------------------ parsing


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a table, got {type(value).__name__}")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    prefix = f"{path}." if path else ""
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], prefix + name)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(prefix + name, "missing required field")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{path}: {exc}") from None
    return from_dict(RunConfig, raw)


def to_dict(obj) -> dict:
    """JSON-friendly view of a config (infinities as the string "inf")."""
    return jsonable(obj)


def with_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Copy of ``cfg`` with one field replaced, e.g. ``with_override(cfg, "localize.K", 50)``."""
    raw = to_dict(cfg)
    *parents, leaf = dotted.split(".")
    node = raw
    for key in parents:
        if not isinstance(node.get(key), dict):
            raise ConfigError(dotted, "no such table")
        node = node[key]
    if leaf not in node:
        raise ConfigError(dotted, "unknown key")
    node[leaf] = jsonable(value)
    return from_dict(RunConfig, raw)
