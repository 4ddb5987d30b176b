"""Policy optimisation: weighted expectile critics, a CVAE behavior model and
the regularised advantage-weighted actor, plus the end-to-end training loop.

Per gradient step, with a target half-batch and a (filtered) source half-batch:

1. V: expectile regression of ``V(s)`` onto ``Q_target(s, a)`` over both halves.
2. Q: squared TD error against ``r + gamma V(s')``; the target half is
   averaged with weight 1, the source half with weights ``exp(-alpha d_hat)``,
   and the two averages are summed.
3. Polyak update of ``Q_target``.
4. Actor: ``-E[min(exp(beta A), 100) log pi(a|s)] - lambda E[log p_b(mu(s)|s)]``
   with ``A = Q_target(s, a) - V(s)`` and ``p_b`` the CVAE mixture density.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from ._json import jsonable
from .data import Dataset, NormStats, normalization_stats, normalize
from .divergence import ClassifierConfig, estimate_divergence
from .filter import FilterConfig, WeightedDataset, build_weighted_dataset
from .localize import assign_source, cluster_counts, kmeans_fit, union_localize
from .seeding import stage_rng

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.7
    beta: float = 3.0
    eta: float = 5e-3
    lam: float = 0.5
    src_batch: int = 128
    tar_batch: int = 128
    steps: int = 10_000
    lr: float = 3e-4
    hidden: tuple[int, ...] = (256, 256)
    adv_clip: float = 100.0
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    max_grad_norm: float | None = None
    discrete_actions: bool = False
    action_bound: float | None = None
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.src_batch < 0 or self.tar_batch < 1:
            raise ValueError("need tar_batch >= 1 and src_batch >= 0")
        if self.steps < 0 or self.log_every < 1:
            raise ValueError("steps must be >= 0 and log_every >= 1")


@dataclass(frozen=True)
class CvaeConfig:
    hidden: tuple[int, ...] = (256, 256)
    latent_dim: int | None = None  # defaults to 2 * d_a
    lr: float = 1e-3
    steps: int = 10_000
    batch_size: int = 256
    M: int = 10
    sigma_b: float = math.sqrt(0.1)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.sigma_b > 0:
            raise ValueError("sigma_b must be positive")


@dataclass(frozen=True)
class LocalizeConfig:
    K: int = 30
    delta: float = 1.5
    union: bool = False
    max_iters: int = 300
    tol: float = 1e-8

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class LodadaConfig:
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    normalize: bool = False


METHODS = ("lodada", "iql-pooled", "iql-target-only")


def method_config(config: LodadaConfig, method: str) -> LodadaConfig:
    """Apply the ablation overrides of ``method``."""
    if method == "lodada":
        return config
    if method == "iql-pooled":
        return replace(
            config,
            localize=replace(config.localize, delta=math.inf),
            filter=replace(config.filter, xi1=100.0, xi2=100.0, xi3=100.0, alpha=0.0),
            train=replace(config.train, lam=0.0),
        )
    if method == "iql-target-only":
        t = config.train
        return replace(config, train=replace(t, lam=0.0, src_batch=0,
                                             tar_batch=t.tar_batch + t.src_batch))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# ------------------------------------------------------------------- losses


def expectile_loss(u, tau: float):
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0, 1.0 - tau, tau)
    out = w * u * u
    return float(out) if out.ndim == 0 else out


def _expectile_grad(u: np.ndarray, tau: float) -> np.ndarray:
    return 2.0 * np.where(u < 0, 1.0 - tau, tau) * u


# ------------------------------------------------------------------- bundle


@dataclass(frozen=True, eq=False)
class PolicyBundle:
    V: nn.MlpParams
    Q: nn.MlpParams
    Q_target: nn.MlpParams
    actor: nn.MlpParams
    v_opt: nn.AdamState
    q_opt: nn.AdamState
    actor_opt: nn.AdamState
    step: int = 0
    d_s: int = 0
    d_a: int = 0
    discrete: bool = False
    action_bound: float | None = None
    log_std_min: float = -20.0
    log_std_max: float = 2.0


def init_bundle(d_s: int, d_a: int, config: TrainConfig, seed: int) -> PolicyBundle:
    rng = stage_rng(seed, "init")
    h = config.hidden
    V = nn.init_mlp(d_s, h, 1, rng)
    Q = nn.init_mlp(d_s + d_a, h, 1, rng)
    out = d_a if config.discrete_actions else 2 * d_a
    actor = nn.init_mlp(d_s, h, out, rng, final_scale=0.01)
    Q_target = Q.with_arrays([a.copy() for a in Q.arrays()])
    mk = lambda p: nn.adam_init(p, lr=config.lr, max_grad_norm=config.max_grad_norm)  # noqa: E731
    return PolicyBundle(V, Q, Q_target, actor, mk(V), mk(Q), mk(actor), 0, d_s, d_a,
                        config.discrete_actions, config.action_bound, config.log_std_min,
                        config.log_std_max)


def _check_finite(name: str, value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} at step {step}: {value!r}")


def update_value(bundle: PolicyBundle, s, a, tau: float) -> tuple[PolicyBundle, float]:
    """One expectile-regression step of V towards the frozen Q_target."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("value update needs a non-empty batch")
    q = nn.forward(bundle.Q_target, np.concatenate([s, a], axis=1))[:, 0]
    v, cache = nn.forward_cached(bundle.V, s)
    u = q - v[:, 0]
    loss = float(np.mean(expectile_loss(u, tau)))
    _check_finite("value loss", loss, bundle.step)
    g = -_expectile_grad(u, tau)[:, None] / u.shape[0]
    grads, _ = nn.backprop(bundle.V, cache, g)
    opt, V = nn.optimizer_step(bundle.v_opt, bundle.V, grads)
    return replace(bundle, V=V, v_opt=opt), loss


@dataclass(frozen=True)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def __len__(self) -> int:
        return self.s.shape[0]


def batch_of(ds: Dataset, idx) -> Batch:
    return Batch(ds.s[idx], ds.a[idx], ds.r[idx], ds.s_next[idx])


def q_loss_and_grad(Q: nn.MlpParams, V: nn.MlpParams, tar: Batch, src: Batch | None,
                    src_weights, gamma: float):
    """Loss and parameter gradients of the two-half weighted TD objective."""
    parts = [tar] + ([src] if src is not None and len(src) else [])
    z = np.concatenate([p.z for p in parts])
    s_next = np.concatenate([p.s_next for p in parts])
    r = np.concatenate([p.r for p in parts])
    y = r + gamma * nn.forward(V, s_next)[:, 0]
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite TD target")
    q, cache = nn.forward_cached(Q, z)
    delta = q[:, 0] - y
    nt = len(tar)
    coef = np.empty_like(delta)
    coef[:nt] = 1.0 / nt
    if len(parts) == 2:
        w = np.asarray(src_weights, dtype=np.float64)
        coef[nt:] = w / len(src)
    loss = float(np.sum(coef * delta * delta))
    grads, _ = nn.backprop(Q, cache, (2.0 * coef * delta)[:, None])
    return loss, grads


def update_q(bundle: PolicyBundle, tar: Batch, src: Batch | None, src_weights,
             gamma: float) -> tuple[PolicyBundle, float]:
    loss, grads = q_loss_and_grad(bundle.Q, bundle.V, tar, src, src_weights, gamma)
    _check_finite("critic loss", loss, bundle.step)
    opt, Q = nn.optimizer_step(bundle.q_opt, bundle.Q, grads)
    return replace(bundle, Q=Q, q_opt=opt), loss


def polyak_update(bundle: PolicyBundle, eta: float) -> PolicyBundle:
    return replace(bundle, Q_target=nn.polyak(bundle.Q_target, bundle.Q, eta))


# -------------------------------------------------------------------- actor


@dataclass(frozen=True)
class ActorHead:
    discrete: bool
    d_a: int
    action_bound: float | None = None
    log_std_min: float = -20.0
    log_std_max: float = 2.0

    @classmethod
    def of(cls, bundle: PolicyBundle) -> "ActorHead":
        return cls(bundle.discrete, bundle.d_a, bundle.action_bound, bundle.log_std_min,
                   bundle.log_std_max)

    def mean_and_log_std(self, raw: np.ndarray):
        """Continuous head: (mean, clamped log-std, dmean/draw, in-range mask)."""
        d = self.d_a
        m_raw, ls_raw = raw[:, :d], raw[:, d:]
        if self.action_bound is None:
            mu, dmu = m_raw, np.ones_like(m_raw)
        else:
            t = np.tanh(m_raw)
            mu, dmu = self.action_bound * t, self.action_bound * (1.0 - t * t)
        ls = np.clip(ls_raw, self.log_std_min, self.log_std_max)
        mask = (ls_raw > self.log_std_min) & (ls_raw < self.log_std_max)
        return mu, ls, dmu, mask

    def mean_action(self, raw: np.ndarray) -> np.ndarray:
        if self.discrete:
            return _softmax(raw)
        return self.mean_and_log_std(raw)[0]


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def actor_log_prob(head: ActorHead, raw: np.ndarray, a: np.ndarray):
    """log pi(a|s) per row and its gradient w.r.t. the raw network output."""
    if head.discrete:
        idx = np.argmax(a, axis=1)
        lsm = _log_softmax(raw)
        logp = lsm[np.arange(raw.shape[0]), idx]
        onehot = np.zeros_like(raw)
        onehot[np.arange(raw.shape[0]), idx] = 1.0
        return logp, onehot - np.exp(lsm)
    mu, ls, dmu, mask = head.mean_and_log_std(raw)
    inv_var = np.exp(-2.0 * ls)
    diff = a - mu
    logp = np.sum(-0.5 * diff * diff * inv_var - ls - 0.5 * LOG_2PI, axis=1)
    g_mu = diff * inv_var * dmu
    g_ls = (diff * diff * inv_var - 1.0) * mask
    return logp, np.concatenate([g_mu, g_ls], axis=1)


def actor_log_std(head: ActorHead, raw: np.ndarray) -> np.ndarray:
    return head.mean_and_log_std(raw)[1]


# --------------------------------------------------------------------- CVAE


@dataclass(frozen=True, eq=False)
class CvaeModel:
    encoder: nn.MlpParams
    decoder: nn.MlpParams
    latent_dim: int
    M: int = 10
    sigma_b: float = math.sqrt(0.1)
    losses: tuple[float, ...] = ()

    @property
    def d_a(self) -> int:
        return self.decoder.out_dim

    @property
    def d_s(self) -> int:
        return self.decoder.in_dim - self.latent_dim


def latent_kl(mu, logvar) -> np.ndarray:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) per row."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    lv = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    return 0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0, axis=1)


def init_cvae(d_s: int, d_a: int, config: CvaeConfig, rng: np.random.Generator) -> CvaeModel:
    L = config.latent_dim or 2 * d_a
    enc = nn.init_mlp(d_s + d_a, config.hidden, 2 * L, rng)
    dec = nn.init_mlp(d_s + L, config.hidden, d_a, rng)
    return CvaeModel(enc, dec, L, config.M, config.sigma_b)


def cvae_loss_and_grads(encoder: nn.MlpParams, decoder: nn.MlpParams, s, a, eps):
    """Reconstruction + latent KL for fixed reparameterisation noise ``eps``.

    Returns ``(loss, enc_grads, dec_grads, (recon, kl))``.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    n, L = s.shape[0], eps.shape[1]
    h, cache_e = nn.forward_cached(encoder, np.concatenate([s, a], axis=1))
    mu, lv = h[:, :L], h[:, L:]
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    rec, cache_d = nn.forward_cached(decoder, np.concatenate([s, z], axis=1))
    diff = rec - a
    recon = float(np.mean(np.sum(diff * diff, axis=1)))
    kl = float(np.mean(latent_kl(mu, lv)))
    dec_grads, g_in = nn.backprop(decoder, cache_d, 2.0 * diff / n)
    gz = g_in[:, s.shape[1]:]
    g_mu = gz + mu / n
    g_lv = gz * eps * 0.5 * std + 0.5 * (np.exp(lv) - 1.0) / n
    enc_grads, _ = nn.backprop(encoder, cache_e, np.concatenate([g_mu, g_lv], axis=1))
    return recon + kl, enc_grads, dec_grads, (recon, kl)


def train_cvae(target: Dataset, config: CvaeConfig, seed: int) -> CvaeModel:
    """Fit the behavior model on target (s, a) pairs only."""
    rng = stage_rng(seed, "cvae")
    model = init_cvae(target.d_s, target.d_a, config, rng)
    enc, dec = model.encoder, model.decoder
    opt_e = nn.adam_init(enc, lr=config.lr)
    opt_d = nn.adam_init(dec, lr=config.lr)
    n = len(target)
    losses = []
    for _ in range(config.steps):
        idx = rng.integers(n, size=min(config.batch_size, n))
        eps = rng.standard_normal((idx.shape[0], model.latent_dim))
        loss, ge, gd, _ = cvae_loss_and_grads(enc, dec, target.s[idx], target.a[idx], eps)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite CVAE loss after {len(losses)} steps")
        opt_e, enc = nn.optimizer_step(opt_e, enc, ge)
        opt_d, dec = nn.optimizer_step(opt_d, dec, gd)
        losses.append(loss)
    return replace(model, encoder=enc, decoder=dec, losses=tuple(losses))


def decode(cvae: CvaeModel, s, z) -> np.ndarray:
    return nn.forward(cvae.decoder, np.concatenate([np.atleast_2d(s), np.atleast_2d(z)], axis=1))


def sample_latents(cvae: CvaeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, cvae.M, cvae.latent_dim))


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def behavior_log_density_and_grad(cvae: CvaeModel, s, a_query, latents):
    """log sum_i N(a; D(s, z_i), sigma_b^2 I) per row, and its gradient in ``a``.

    ``latents`` has shape (n, M', L) or (M', L) (shared across rows).
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a_query, dtype=np.float64))
    n = s.shape[0]
    lat = np.asarray(latents, dtype=np.float64)
    if lat.ndim == 2:
        lat = np.broadcast_to(lat, (n, *lat.shape))
    M = lat.shape[1]
    s_rep = np.repeat(s, M, axis=0)
    means = decode(cvae, s_rep, lat.reshape(n * M, -1)).reshape(n, M, -1)
    var = cvae.sigma_b**2
    d_a = means.shape[2]
    diff = a[:, None, :] - means
    comp = -0.5 * np.sum(diff * diff, axis=2) / var - 0.5 * d_a * math.log(2.0 * math.pi * var)
    logp = _logsumexp(comp, axis=1)
    resp = np.exp(comp - logp[:, None])
    grad = -np.sum(resp[:, :, None] * diff, axis=1) / var
    return logp, grad


def behavior_log_density(cvae: CvaeModel, s, a_query, rng: np.random.Generator | None = None,
                         latents=None):
    """Mixture log-density of ``a_query`` under M decoded Gaussians."""
    single = np.ndim(s) == 1
    n = 1 if single else np.shape(s)[0]
    if latents is None:
        latents = sample_latents(cvae, n, rng if rng is not None else np.random.default_rng(0))
    logp, _ = behavior_log_density_and_grad(cvae, s, a_query, latents)
    return float(logp[0]) if single else logp


# ------------------------------------------------------------- actor update


def actor_loss_and_grad(bundle: PolicyBundle, s, a, beta: float, lam: float,
                        adv_clip: float = 100.0, cvae: CvaeModel | None = None, latents=None):
    """Loss, parameter gradients and diagnostics of the regularised actor objective."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    n = s.shape[0]
    q = nn.forward(bundle.Q_target, np.concatenate([s, a], axis=1))[:, 0]
    v = nn.forward(bundle.V, s)[:, 0]
    adv = q - v
    w = np.minimum(np.exp(np.minimum(beta * adv, 700.0)), adv_clip)
    head = ActorHead.of(bundle)
    raw, cache = nn.forward_cached(bundle.actor, s)
    logp, g_logp = actor_log_prob(head, raw, a)
    bc = float(-np.mean(w * logp))
    g_raw = -(w[:, None] * g_logp) / n
    reg = 0.0
    if lam > 0:
        if cvae is None:
            raise ValueError("lam > 0 requires a behavior model")
        mu = head.mean_action(raw)
        lp, g_a = behavior_log_density_and_grad(cvae, s, mu, latents)
        reg = float(np.mean(lp))
        g_mu = -lam * g_a / n
        if head.discrete:
            p = mu
            g_raw = g_raw + p * (g_mu - np.sum(p * g_mu, axis=1, keepdims=True))
        else:
            _, _, dmu, _ = head.mean_and_log_std(raw)
            g_raw[:, : head.d_a] += g_mu * dmu
    loss = bc - lam * reg
    grads, _ = nn.backprop(bundle.actor, cache, g_raw)
    return loss, grads, {"bc": bc, "reg": reg, "adv_mean": float(np.mean(adv))}


def update_actor(bundle: PolicyBundle, s, a, beta: float, lam: float, adv_clip: float = 100.0,
                 cvae: CvaeModel | None = None, latents=None) -> tuple[PolicyBundle, float]:
    loss, grads, _ = actor_loss_and_grad(bundle, s, a, beta, lam, adv_clip, cvae, latents)
    _check_finite("actor loss", loss, bundle.step)
    opt, actor = nn.optimizer_step(bundle.actor_opt, bundle.actor, grads)
    return replace(bundle, actor=actor, actor_opt=opt), loss


def act(bundle: PolicyBundle, s) -> np.ndarray:
    """Deterministic action: mean for Gaussian heads, argmax index for categorical ones."""
    raw = nn.forward(bundle.actor, np.atleast_2d(s))
    head = ActorHead.of(bundle)
    if head.discrete:
        return np.argmax(raw, axis=1)
    return head.mean_and_log_std(raw)[0]


# ------------------------------------------------------------ training loop


@dataclass(frozen=True)
class LossTrace:
    v: np.ndarray
    q: np.ndarray
    actor: np.ndarray

    def downsample(self, every: int) -> dict:
        idx = np.arange(0, self.v.shape[0], every)
        return {"step": (idx + 1).tolist(), "v": self.v[idx].tolist(),
                "q": self.q[idx].tolist(), "actor": self.actor[idx].tolist()}


def train_policy(target: Dataset, source: Dataset | None, src_weights, config: TrainConfig,
                 seed: int, cvae: CvaeModel | None = None,
                 callback: Callable[[int, PolicyBundle], None] | None = None):
    """Run the gradient loop; returns ``(bundle, LossTrace)``.

    Each step draws ``tar_batch`` target indices and then ``src_batch``
    source indices (with replacement) from the ``"batches"`` stream; latents
    for the regulariser come from the separate ``"latents"`` stream.
    """
    bundle = init_bundle(target.d_s, target.d_a, config, seed)
    batch_rng = stage_rng(seed, "batches")
    latent_rng = stage_rng(seed, "latents")
    use_src = source is not None and config.src_batch > 0 and len(source) > 0
    weights = np.asarray(src_weights, dtype=np.float64) if use_src else None
    T = config.steps
    tv, tq, ta = np.empty(T), np.empty(T), np.empty(T)
    for t in range(T):
        ti = batch_rng.integers(len(target), size=config.tar_batch)
        tar = batch_of(target, ti)
        src, w = None, None
        if use_src:
            si = batch_rng.integers(len(source), size=config.src_batch)
            src, w = batch_of(source, si), weights[si]
        s = tar.s if src is None else np.concatenate([tar.s, src.s])
        a = tar.a if src is None else np.concatenate([tar.a, src.a])
        bundle, lv = update_value(bundle, s, a, config.tau)
        bundle, lq = update_q(bundle, tar, src, w, config.gamma)
        bundle = polyak_update(bundle, config.eta)
        latents = sample_latents(cvae, s.shape[0], latent_rng) if config.lam > 0 else None
        bundle, la = update_actor(bundle, s, a, config.beta, config.lam, config.adv_clip,
                                  cvae, latents)
        bundle = replace(bundle, step=bundle.step + 1)
        tv[t], tq[t], ta[t] = lv, lq, la
        if callback is not None:
            callback(t + 1, bundle)
    return bundle, LossTrace(tv, tq, ta)


@dataclass(frozen=True, eq=False)
class RunResult:
    bundle: PolicyBundle
    report: dict
    trace: LossTrace
    weighted: WeightedDataset | None = None
    cvae: CvaeModel | None = None
    norm: NormStats | None = None


def run_lodada(source: Dataset, target: Dataset, config: LodadaConfig, seed: int,
               method: str = "lodada") -> RunResult:
    """CVAE -> localisation -> per-cluster KL -> filtering -> gradient loop.

    Stage failures are re-raised as :class:`StageError` naming the stage.
    Timings live under ``report["timings"]``; everything else in the report
    is a deterministic function of the inputs, config and seed.
    """
    config = method_config(config, method)
    if source.d_s != target.d_s or source.d_a != target.d_a:
        raise ValueError("source and target dimensions differ")
    timings: dict[str, float] = {}
    report: dict = {"method": method, "seed": seed, "config": jsonable(config),
                    "n_source": len(source), "n_target": len(target)}

    def stage(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            out = fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return out

    norm = None
    if config.normalize:
        norm = normalization_stats(source, target)
        source, target = normalize(source, norm), normalize(target, norm)
        report["normalization"] = norm.to_json()

    cvae = None
    if config.train.lam > 0:
        cvae = stage("cvae", lambda: train_cvae(target, config.cvae, seed))
        report["cvae"] = {"final_loss": cvae.losses[-1] if cvae.losses else None,
                          "loss_curve": list(cvae.losses[:: max(1, len(cvae.losses) // 50)])}

    weighted = None
    src_ds, src_w = None, None
    if config.train.src_batch > 0:
        lc = config.localize

        def localize():
            if lc.union:
                return union_localize(target.s_next, source.s_next, lc.K, lc.delta,
                                      seed, lc.max_iters, lc.tol)
            model = kmeans_fit(target.s_next, lc.K, seed, lc.max_iters, lc.tol)
            return model, assign_source(model, source.s_next, lc.delta)

        model, assignment = stage("localize", localize)
        n0, n1 = cluster_counts(model, assignment)
        report["localize"] = {"K": model.K, "mean_radius": model.mean_radius,
                              "threshold": None if math.isinf(assignment.threshold)
                              else assignment.threshold,
                              "n_accepted": assignment.n_accepted,
                              "n_rejected": int(len(source) - assignment.n_accepted),
                              "N0": n0.tolist(), "N1": n1.tolist()}
        div = stage("divergence", lambda: estimate_divergence(
            model, assignment, target.z(), source.z(), config.classifier, seed))
        report["divergence"] = div.to_json()
        weighted = stage("filter", lambda: build_weighted_dataset(
            source, target, div, config.filter, {"seed": seed, "method": method}))
        report["filter"] = weighted.summary(len(source))
        src_ds, src_w = weighted.source, weighted.weight

    bundle, trace = stage("train", lambda: train_policy(target, src_ds, src_w, config.train,
                                                        seed, cvae))
    report["train"] = {"steps": int(bundle.step),
                       "losses": trace.downsample(config.train.log_every)}
    report["timings"] = timings
    return RunResult(bundle, report, trace, weighted, cvae, norm)


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings"}
