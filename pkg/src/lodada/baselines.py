"""A plain implicit Q-learning loop written independently of the main pipeline.

It serves as the reference for the pooled-IQL reduction: no clustering, no
weights, no behavior model. Batches are drawn per domain (target half, then
source half) and the critic loss is the sum of the two per-half means, the
same sampling protocol the main loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .seeding import stage_rng


@dataclass
class IqlNets:
    V: nn.MlpParams
    Q: nn.MlpParams
    Qt: nn.MlpParams
    pi: nn.MlpParams


def vanilla_iql(target: Dataset, source: Dataset | None, *, steps: int, seed: int,
                hidden=(256, 256), lr: float = 3e-4, gamma: float = 0.99, tau: float = 0.7,
                beta: float = 3.0, eta: float = 5e-3, tar_batch: int = 128,
                src_batch: int = 128, action_bound: float | None = None,
                discrete: bool = False, adv_clip: float = 100.0,
                log_std_min: float = -20.0, log_std_max: float = 2.0):
    """Returns ``(nets, {"v": [...], "q": [...], "actor": [...]})``."""
    d_s, d_a = target.d_s, target.d_a
    init = stage_rng(seed, "init")
    V = nn.init_mlp(d_s, hidden, 1, init)
    Q = nn.init_mlp(d_s + d_a, hidden, 1, init)
    pi = nn.init_mlp(d_s, hidden, d_a if discrete else 2 * d_a, init, final_scale=0.01)
    Qt = Q.with_arrays([x.copy() for x in Q.arrays()])
    ov, oq, op = (nn.adam_init(p, lr=lr) for p in (V, Q, pi))
    rng = stage_rng(seed, "batches")
    use_src = source is not None and src_batch > 0
    traces = {"v": [], "q": [], "actor": []}

    for _ in range(steps):
        ti = rng.integers(len(target), size=tar_batch)
        halves = [(target, ti)]
        if use_src:
            halves.append((source, rng.integers(len(source), size=src_batch)))
        s = np.concatenate([d.s[i] for d, i in halves])
        a = np.concatenate([d.a[i] for d, i in halves])
        r = np.concatenate([d.r[i] for d, i in halves])
        sn = np.concatenate([d.s_next[i] for d, i in halves])
        sa = np.hstack([s, a])

        # value: asymmetric L2 towards the target critic
        diff = nn.forward(Qt, sa)[:, 0] - nn.forward(V, s)[:, 0]
        wt = np.abs(tau - (diff < 0).astype(np.float64))
        traces["v"].append(float(np.mean(wt * diff**2)))
        gV = nn.backward(V, s, (-2.0 * wt * diff / len(diff))[:, None])
        ov, V = nn.optimizer_step(ov, V, gV)

        # critic: per-domain mean squared TD errors, summed
        target_q = r + gamma * nn.forward(V, sn)[:, 0]
        td = nn.forward(Q, sa)[:, 0] - target_q
        sizes = [len(i) for _, i in halves]
        scale = np.concatenate([np.full(k, 1.0 / k) for k in sizes])
        traces["q"].append(float(sum(np.mean(td[o:o + k] ** 2)
                                     for o, k in zip(np.cumsum([0] + sizes[:-1]), sizes))))
        gQ = nn.backward(Q, sa, (2.0 * scale * td)[:, None])
        oq, Q = nn.optimizer_step(oq, Q, gQ)
        Qt = nn.polyak(Qt, Q, eta)

        # actor: advantage-weighted regression
        adv = nn.forward(Qt, sa)[:, 0] - nn.forward(V, s)[:, 0]
        w = np.minimum(np.exp(np.minimum(beta * adv, 700.0)), adv_clip)
        out = nn.forward(pi, s)
        n = len(s)
        if discrete:
            z = out - out.max(axis=1, keepdims=True)
            logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            k = np.argmax(a, axis=1)
            logp = logp_all[np.arange(n), k]
            g = np.exp(logp_all)
            g[np.arange(n), k] -= 1.0
            g_out = w[:, None] * g / n
        else:
            mean_raw, ls_raw = out[:, :d_a], out[:, d_a:]
            if action_bound is None:
                mu, dmu = mean_raw, 1.0
            else:
                mu = action_bound * np.tanh(mean_raw)
                dmu = action_bound * (1.0 - np.tanh(mean_raw) ** 2)
            ls = np.clip(ls_raw, log_std_min, log_std_max)
            inside = (ls_raw > log_std_min) & (ls_raw < log_std_max)
            var = np.exp(2.0 * ls)
            logp = (-0.5 * (a - mu) ** 2 / var - ls - 0.5 * np.log(2 * np.pi)).sum(axis=1)
            g_mu = -w[:, None] * (a - mu) / var * dmu / n
            g_ls = -w[:, None] * ((a - mu) ** 2 / var - 1.0) * inside / n
            g_out = np.hstack([g_mu, g_ls])
        traces["actor"].append(float(-np.mean(w * logp)))
        op, pi = nn.optimizer_step(op, pi, nn.backward(pi, s, g_out))

    return IqlNets(V, Q, Qt, pi), {k: np.array(v) for k, v in traces.items()}
