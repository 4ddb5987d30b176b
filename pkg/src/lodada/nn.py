"""Small fully connected networks with hand-written reverse-mode gradients.

Everything here is float64 numpy. Parameter sets are immutable value types:
an optimizer step returns new arrays instead of mutating the old ones, which
keeps independent networks (one classifier per cluster, the critics, the
actor) free of shared state.

Checkpoint layout
-----------------
``save_checkpoint(path, nets)`` writes two files:

* ``path`` -- a flat little-endian float64 blob, tensors concatenated in
  manifest order, each in C order.
* ``path + ".json"`` -- the manifest::

      {"format": "lodada-mlp-v1", "dtype": "<f8",
       "networks": {"<name>": {"activations": [...],
                               "tensors": [{"key": "W0", "shape": [i, o],
                                            "offset": k}, ...]}},
       "meta": {...}}

  ``offset`` counts float64 elements from the start of the blob.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    return np.ones_like(pre)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class MlpParams:
    """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {l}: bad shapes W{W.shape} b{b.shape}")
            if l > 0 and W.shape[0] != self.weights[l - 1].shape[1]:
                raise ValueError(f"layer {l}: fan_in {W.shape[0]} does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def names(self) -> list[str]:
        out = []
        for l in range(self.n_layers):
            out.extend((f"W{l}", f"b{l}"))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activations)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Gradients":
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def scaled(self, c: float) -> "Gradients":
        return Gradients.from_arrays([c * g for g in self.arrays()])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients.from_arrays([g + h for g, h in zip(self.arrays(), other.arrays())])

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays()))


def init_mlp(
    in_dim: int,
    hidden: Sequence[int],
    out_dim: int,
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    out_activation: str = "identity",
    final_scale: float = 1.0,
) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) init; the last layer is further scaled by ``final_scale``."""
    sizes = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for l, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(max(fi, 1))
        W = rng.uniform(-bound, bound, size=(fi, fo))
        b = rng.uniform(-bound, bound, size=(fo,))
        if l == len(sizes) - 2:
            W, b = W * final_scale, b * final_scale
        weights.append(W)
        biases.append(b)
    acts = [hidden_activation] * len(hidden) + [out_activation]
    return MlpParams(tuple(weights), tuple(biases), tuple(acts))


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim={params.in_dim}")
    return x, single


def forward(params: MlpParams, x) -> np.ndarray:
    h, single = _as_batch(params, x)
    for W, b, act in zip(params.weights, params.biases, params.activations):
        h = _act(act, h @ W + b)
    return h[0] if single else h


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    h, single = _as_batch(params, x)
    cache = ForwardCache(single=single)
    for W, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        z = h @ W + b
        h = _act(act, z)
        cache.pre.append(z)
        cache.post.append(h)
    return (h[0] if single else h), cache


def backprop(params: MlpParams, cache: ForwardCache, grad_out) -> tuple[Gradients, np.ndarray]:
    """Gradients of a scalar loss given dloss/doutput; also returns dloss/dinput."""
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    gW: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(params.n_layers - 1, -1, -1):
        act = params.activations[l]
        if act != "identity":
            g = g * _act_grad(act, cache.pre[l], cache.post[l])
        gW[l] = cache.inputs[l].T @ g
        gb[l] = g.sum(axis=0)
        g = g @ params.weights[l].T
    gx = g[0] if cache.single else g
    return Gradients(tuple(gW), tuple(gb)), gx


def backward(params: MlpParams, x, loss_grad) -> Gradients:
    """Exact gradients of a scalar loss w.r.t. all parameters.

    ``loss_grad`` is dloss/dy for ``y = forward(params, x)``; the forward pass
    is recomputed.
    """
    _, cache = forward_cached(params, x)
    grads, _ = backprop(params, cache, loss_grad)
    return grads


def zero_gradients(params: MlpParams) -> Gradients:
    return Gradients.from_arrays([np.zeros_like(a) for a in params.arrays()])


def clip_by_global_norm(grads: Gradients, max_norm: float) -> Gradients:
    norm = grads.global_norm()
    if norm <= max_norm or norm == 0.0:
        return grads
    return grads.scaled(max_norm / norm)


def polyak(target: MlpParams, online: MlpParams, eta: float) -> MlpParams:
    """theta' <- eta * theta + (1 - eta) * theta'."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if eta == 1.0:
        return online.with_arrays([a.copy() for a in online.arrays()])
    return target.with_arrays(
        [eta * o + (1.0 - eta) * t for t, o in zip(target.arrays(), online.arrays())]
    )


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_init(params: MlpParams, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, max_grad_norm: float | None = None) -> AdamState:
    zeros = tuple(np.zeros_like(a) for a in params.arrays())
    return AdamState(zeros, tuple(np.zeros_like(a) for a in params.arrays()), 0, lr, beta1,
                     beta2, eps, max_grad_norm)


def optimizer_step(state: AdamState, params: MlpParams,
                   grads: Gradients) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update. Raises if any gradient entry is not finite."""
    garr = grads.arrays()
    parr = params.arrays()
    if len(garr) != len(parr):
        raise ValueError("gradient structure does not match parameters")
    for name, g, p in zip(params.names(), garr, parr):
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name}")
    if state.max_grad_norm is not None:
        garr = clip_by_global_norm(grads, state.max_grad_norm).arrays()
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for g, m, v, p in zip(garr, state.m, state.v, parr):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps,
                          state.max_grad_norm)
    return new_state, params.with_arrays(new_p)


# -------------------------------------------------------------- grad check


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    params: MlpParams,
    x,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    h: float = 1e-5,
    tol: float = 1e-4,
    grad_fn: Callable[[MlpParams, np.ndarray, np.ndarray], Gradients] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn(y)`` returns ``(loss, dloss/dy)``. ``grad_fn`` defaults to
    :func:`backward`; pass a different one to check an alternative path.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grad_fn = grad_fn or backward
    y = forward(params, x)
    _, dy = loss_fn(y)
    analytic = grad_fn(params, x, dy).arrays()
    arrays = [a.copy() for a in params.arrays()]
    names = params.names()
    worst = (0.0, names[0], (0,))
    n = 0
    for k, arr in enumerate(arrays):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _ = loss_fn(forward(params.with_arrays(arrays), x))
            arr[idx] = orig - h
            lm, _ = loss_fn(forward(params.with_arrays(arrays), x))
            arr[idx] = orig
            fd[idx] = (lp - lm) / (2.0 * h)
            n += 1
        err = relative_error(analytic[k], fd)
        if err.size and err.max() > worst[0]:
            i = np.unravel_index(int(np.argmax(err)), err.shape)
            worst = (float(err.max()), names[k], tuple(int(j) for j in i))
    return GradCheckReport(worst[0], worst[0] <= tol, worst[1], worst[2], n)


def finite_difference(f: Callable[[], float], arrays: Sequence[np.ndarray],
                      h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a zero-argument scalar function w.r.t. arrays mutated in place."""
    out = []
    for arr in arrays:
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = f()
            arr[idx] = orig - h
            lm = f()
            arr[idx] = orig
            fd[idx] = (lp - lm) / (2.0 * h)
        out.append(fd)
    return out


# ------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "lodada-mlp-v1"


def save_checkpoint(path, nets: dict[str, MlpParams], meta: dict | None = None) -> None:
    path = Path(path)
    manifest: dict = {"format": CHECKPOINT_FORMAT, "dtype": "<f8", "networks": {},
                      "meta": meta or {}}
    chunks = []
    offset = 0
    for name, p in nets.items():
        tensors = []
        for key, arr in zip(p.names(), p.arrays()):
            tensors.append({"key": key, "shape": list(arr.shape), "offset": offset})
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
            offset += arr.size
        manifest["networks"][name] = {"activations": list(p.activations), "tensors": tensors}
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    path.write_bytes(blob.astype("<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    nets = {}
    for name, spec in manifest["networks"].items():
        arrays = []
        for t in spec["tensors"]:
            size = int(np.prod(t["shape"])) if t["shape"] else 1
            chunk = blob[t["offset"]: t["offset"] + size]
            if chunk.size != size:
                raise ValueError(f"{path}: truncated tensor {name}.{t['key']}")
            arrays.append(chunk.reshape(t["shape"]).astype(np.float64))
        nets[name] = MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]),
                               tuple(spec["activations"]))
    return nets, manifest.get("meta", {})
