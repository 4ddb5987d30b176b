"""Synthetic environments with known dynamics and exact oracles.

Two families:

* ``GridworldSpec`` -- a slippery grid with absorbing goal cells. States and
  actions are one-hot encoded in datasets. Exact value iteration and exact
  policy evaluation are available.
* ``LinearGaussianSpec`` -- ``s' = A s + B a + b + eps`` where the noise
  covariance is picked by the region (nearest centroid) of the deterministic
  part ``A s + B a + b``. Transition KL between two specs is closed form, and
  a discounted LQR gain serves as the expert controller.

Policies passed to rollouts map an encoded state vector and a numpy
``Generator`` to an encoded action vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, Domain

# row, col deltas: up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
N_GRID_ACTIONS = 4

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


# ---------------------------------------------------------------- gridworld


@dataclass(frozen=True, eq=False)
class GridworldSpec:
    width: int
    height: int
    slip: np.ndarray  # (height, width) probability of a random other move
    reward: np.ndarray  # (height, width) reward for occupying a cell
    gamma: float
    goals: frozenset
    start: tuple[int, int] = (0, 0)
    horizon: int = 50

    def __post_init__(self):
        slip = np.broadcast_to(np.asarray(self.slip, dtype=np.float64), (self.height, self.width)).copy()
        reward = np.broadcast_to(np.asarray(self.reward, dtype=np.float64), (self.height, self.width)).copy()
        object.__setattr__(self, "slip", slip)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "goals", frozenset(tuple(g) for g in self.goals))
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have at least one cell")
        if np.any(slip < 0) or np.any(slip > 1):
            raise ValueError("slip probabilities must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.goals:
            raise ValueError("at least one goal cell is required")
        for g in self.goals:
            if not (0 <= g[0] < self.height and 0 <= g[1] < self.width):
                raise ValueError(f"goal {g} outside the grid")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def d_s(self) -> int:
        return self.n_states

    @property
    def d_a(self) -> int:
        return N_GRID_ACTIONS

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.width)

    def index(self, cell: tuple[int, int]) -> int:
        return cell[0] * self.width + cell[1]

    def is_goal(self, index: int) -> bool:
        return self.cell(index) in self.goals

    def encode_state(self, index: int) -> np.ndarray:
        v = np.zeros(self.n_states)
        v[int(index)] = 1.0
        return v

    def decode_state(self, vec) -> int:
        return int(np.argmax(vec))

    def transition_matrix(self) -> np.ndarray:
        """P[s, a, s'] with goal cells absorbing."""
        S = self.n_states
        P = np.zeros((S, N_GRID_ACTIONS, S))
        for s in range(S):
            if self.is_goal(s):
                P[s, :, s] = 1.0
                continue
            r, c = self.cell(s)
            slip = self.slip[r, c]
            dest = []
            for dr, dc in MOVES:
                nr, nc = r + dr, c + dc
                if not (0 <= nr < self.height and 0 <= nc < self.width):
                    nr, nc = r, c
                dest.append(self.index((nr, nc)))
            for a in range(N_GRID_ACTIONS):
                P[s, a, dest[a]] += 1.0 - slip
                for o in range(N_GRID_ACTIONS):
                    if o != a:
                        P[s, a, dest[o]] += slip / 3.0
        return P

    def reward_vector(self) -> np.ndarray:
        return self.reward.ravel().copy()


def make_gridworld(width: int = 5, height: int = 5, goal=(4, 4), slip: float | np.ndarray = 0.1,
                   goal_reward: float = 1.0, step_reward: float = 0.0, gamma: float = 0.9,
                   start=(0, 0), horizon: int = 50) -> GridworldSpec:
    if not (0 <= goal[0] < height and 0 <= goal[1] < width):
        raise ValueError(f"goal {tuple(goal)} outside the {height}x{width} grid")
    reward = np.full((height, width), step_reward, dtype=np.float64)
    reward[goal[0], goal[1]] = goal_reward
    return GridworldSpec(width, height, np.broadcast_to(slip, (height, width)), reward, gamma,
                         frozenset([tuple(goal)]), tuple(start), horizon)


def _grid_action(spec: GridworldSpec, a) -> int:
    if np.ndim(a) == 0:
        ai = int(a)
    else:
        vec = np.asarray(a, dtype=np.float64)
        if vec.shape != (N_GRID_ACTIONS,):
            raise ValueError(f"gridworld action vector must have length 4, got {vec.shape}")
        ai = int(np.argmax(vec))
    if not 0 <= ai < N_GRID_ACTIONS:
        raise ValueError(f"gridworld action must be in 0..3, got {a}")
    return ai


# ----------------------------------------------------------- linear-Gaussian


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    if np.any(w < -1e-12 * max(1.0, float(np.max(np.abs(w))))):
        raise ValueError("noise covariance must be positive semi-definite")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class LinearGaussianSpec:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    region_centroids: np.ndarray  # (R, d_s)
    region_noise_cov: np.ndarray  # (R, d_s, d_s)
    state_cost: np.ndarray  # reward = -(s^T Q s + a^T R a)
    action_cost: np.ndarray
    gamma: float = 0.9
    horizon: int = 20
    init_low: float = -3.0
    init_high: float = 3.0
    action_bound: float = 2.0
    _factors: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        d_s = A.shape[0]
        B = np.asarray(self.B, dtype=np.float64).reshape(d_s, -1)
        b = np.asarray(self.b, dtype=np.float64).reshape(d_s)
        C = np.asarray(self.region_centroids, dtype=np.float64).reshape(-1, d_s)
        cov = np.asarray(self.region_noise_cov, dtype=np.float64).reshape(-1, d_s, d_s)
        if cov.shape[0] != C.shape[0]:
            raise ValueError("one noise covariance per region centroid is required")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2)):
            raise ValueError("noise covariances must be symmetric")
        Q = np.asarray(self.state_cost, dtype=np.float64).reshape(d_s, d_s)
        R = np.asarray(self.action_cost, dtype=np.float64).reshape(B.shape[1], B.shape[1])
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for k, v in dict(A=A, B=B, b=b, region_centroids=C, region_noise_cov=cov,
                         state_cost=Q, action_cost=R).items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_factors", np.stack([_psd_factor(c) for c in cov]))

    @property
    def d_s(self) -> int:
        return self.A.shape[0]

    @property
    def d_a(self) -> int:
        return self.B.shape[1]

    def mean_next(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        return s @ self.A.T + a @ self.B.T + self.b

    def region_of(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = ((x[:, None, :] - self.region_centroids[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)

    def reward_fn(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        return -(np.einsum("...i,ij,...j->...", s, self.state_cost, s)
                 + np.einsum("...i,ij,...j->...", a, self.action_cost, a))

    def with_noise(self, region_noise_cov) -> "LinearGaussianSpec":
        return LinearGaussianSpec(self.A, self.B, self.b, self.region_centroids, region_noise_cov,
                                  self.state_cost, self.action_cost, self.gamma, self.horizon,
                                  self.init_low, self.init_high, self.action_bound)


def isotropic_covs(variances, d_s: int) -> np.ndarray:
    return np.stack([float(v) * np.eye(d_s) for v in variances])


def make_linear_gaussian(region_variances=(0.01,) * 5, d_s: int = 2, radius: float = 2.0,
                         a_scale: float = 1.0, b_scale: float = 0.5, state_cost: float = 0.1,
                         action_cost: float = 0.05, gamma: float = 0.9, horizon: int = 20,
                         init_low: float = -3.0, init_high: float = 3.0,
                         action_bound: float = 2.0, layout: str = "circle") -> LinearGaussianSpec:
    """Linear system with one noise level per region.

    ``layout="circle"``: region 0 at the origin, the rest evenly spaced on a
    circle of ``radius`` in the first two coordinates. ``layout="line"``:
    centroids evenly spaced on ``[-radius, radius]`` along the first axis.
    """
    R = len(region_variances)
    if layout == "line":
        cents = [np.zeros(d_s) for _ in range(R)]
        for k, x in enumerate(np.linspace(-radius, radius, R) if R > 1 else [0.0]):
            cents[k][0] = x
    elif layout == "circle":
        cents = [np.zeros(d_s)]
        for k in range(R - 1):
            ang = 2 * math.pi * k / max(R - 1, 1)
            c = np.zeros(d_s)
            c[0] = radius * math.cos(ang)
            if d_s > 1:
                c[1] = radius * math.sin(ang)
            cents.append(c)
    else:
        raise ValueError(f"unknown region layout {layout!r}")
    return LinearGaussianSpec(a_scale * np.eye(d_s), b_scale * np.eye(d_s), np.zeros(d_s),
                              np.array(cents[:R]), isotropic_covs(region_variances, d_s),
                              state_cost * np.eye(d_s), action_cost * np.eye(d_s), gamma, horizon,
                              init_low, init_high, action_bound)


# ------------------------------------------------------------------- stepping

Spec = GridworldSpec | LinearGaussianSpec


def step(spec: Spec, s, a, rng: np.random.Generator):
    """Sample one transition.

    Gridworld: ``s`` is a cell index (or one-hot vector), ``a`` an action index
    (or vector, argmax taken); returns ``(next_index, reward)`` with
    ``reward = reward_map[s]``. Linear-Gaussian: vectors in, ``(s_next, r)``
    out.
    """
    if isinstance(spec, GridworldSpec):
        si = int(s) if np.ndim(s) == 0 else spec.decode_state(s)
        ai = _grid_action(spec, a)
        r = float(spec.reward.ravel()[si])
        if spec.is_goal(si):
            return si, r
        row, col = spec.cell(si)
        move = ai
        if spec.slip[row, col] > 0 and rng.random() < spec.slip[row, col]:
            others = [m for m in range(N_GRID_ACTIONS) if m != ai]
            move = others[int(rng.integers(3))]
        dr, dc = MOVES[move]
        nr, nc = row + dr, col + dc
        if not (0 <= nr < spec.height and 0 <= nc < spec.width):
            nr, nc = row, col
        return spec.index((nr, nc)), r
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (spec.d_a,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite vector of length {spec.d_a}")
    mu = spec.mean_next(s, a)
    k = int(spec.region_of(mu)[0])
    s_next = mu + spec._factors[k] @ rng.standard_normal(spec.d_s)
    return s_next, float(spec.reward_fn(s, a))


def _initial_state(spec: Spec, rng: np.random.Generator, uniform: bool) -> np.ndarray:
    if isinstance(spec, GridworldSpec):
        if uniform:
            cells = [i for i in range(spec.n_states) if not spec.is_goal(i)] or [0]
            return spec.encode_state(cells[int(rng.integers(len(cells)))])
        return spec.encode_state(spec.index(spec.start))
    return rng.uniform(spec.init_low, spec.init_high, size=spec.d_s)


def _env_step_encoded(spec: Spec, s_vec: np.ndarray, a_vec: np.ndarray, rng):
    if isinstance(spec, GridworldSpec):
        ni, r = step(spec, s_vec, a_vec, rng)
        return spec.encode_state(ni), r
    return step(spec, s_vec, a_vec, rng)


def _encode_action(spec: Spec, a) -> np.ndarray:
    if isinstance(spec, GridworldSpec):
        v = np.zeros(N_GRID_ACTIONS)
        v[_grid_action(spec, a)] = 1.0
        return v
    return np.asarray(a, dtype=np.float64)


def generate_dataset(spec: Spec, behavior_policy: Policy, n_transitions: int, seed: int,
                     domain_label: Domain | str, name: str = "",
                     uniform_starts: bool = True) -> Dataset:
    """Roll out ``behavior_policy`` in episodes of ``spec.horizon`` steps.

    Every episode draws from its own stream spawned from ``seed``, so the
    result does not depend on the order episodes are produced in.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    H = spec.horizon
    n_eps = -(-n_transitions // H)
    streams = np.random.SeedSequence(seed).spawn(n_eps)
    S, A, R, SN = [], [], [], []
    for e in range(n_eps):
        rng = np.random.default_rng(streams[e])
        s = _initial_state(spec, rng, uniform_starts)
        for _ in range(min(H, n_transitions - e * H)):
            a = _encode_action(spec, behavior_policy(s, rng))
            sn, r = _env_step_encoded(spec, s, a, rng)
            S.append(s)
            A.append(a)
            R.append(r)
            SN.append(sn)
            s = sn
    label = Domain(domain_label)
    return Dataset(np.array(S), np.array(A), np.array(R), np.array(SN),
                   np.full(len(S), label.value), name,
                   {"generator": type(spec).__name__, "seed": seed, "n_transitions": n_transitions})


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EpisodeStats:
    returns: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    def to_json(self) -> dict:
        return {"returns": list(self.returns), "mean": self.mean, "std": self.std,
                "episodes": len(self.returns)}


def rollout_returns(spec: Spec, policy: Policy, episodes: int, seed: int,
                    uniform_starts: bool = False) -> EpisodeStats:
    """Discounted returns over ``spec.horizon`` steps, one RNG stream per episode."""
    streams = np.random.SeedSequence(seed).spawn(episodes)
    out = []
    for e in range(episodes):
        rng = np.random.default_rng(streams[e])
        s = _initial_state(spec, rng, uniform_starts)
        ret, disc = 0.0, 1.0
        for _ in range(spec.horizon):
            a = _encode_action(spec, policy(s, rng))
            s, r = _env_step_encoded(spec, s, a, rng)
            ret += disc * r
            disc *= spec.gamma
        out.append(ret)
    return EpisodeStats(tuple(out))


def normalized_score(J: float, J_random: float, J_expert: float) -> float:
    if not J_expert > J_random:
        raise ValueError(f"expert return ({J_expert}) must exceed random return ({J_random})")
    return (J - J_random) / (J_expert - J_random) * 100.0


# --------------------------------------------------------- gridworld oracles


@dataclass(frozen=True)
class ValueIterationResult:
    values: np.ndarray
    policy: np.ndarray
    q: np.ndarray
    residuals: tuple[float, ...]


def greedy_actions(q: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    """Argmax per row, ties (within atol) broken towards the smallest action index."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - atol, axis=1)


def value_iteration(spec: GridworldSpec, tol: float = 1e-10,
                    max_sweeps: int = 100_000) -> ValueIterationResult:
    P = spec.transition_matrix()
    R = spec.reward_vector()
    V = np.zeros(spec.n_states)
    residuals = []
    for _ in range(max_sweeps):
        Q = R[:, None] + spec.gamma * P @ V
        V_new = Q.max(axis=1)
        res = float(np.max(np.abs(V_new - V)))
        residuals.append(res)
        V = V_new
        # stop once the Bellman residual of V itself is below tol
        if res * spec.gamma / (1.0 - spec.gamma) <= tol or res == 0.0:
            break
    Q = R[:, None] + spec.gamma * P @ V
    return ValueIterationResult(V, greedy_actions(Q), Q, tuple(residuals))


def policy_matrix(spec: GridworldSpec, actions) -> np.ndarray:
    pi = np.zeros((spec.n_states, N_GRID_ACTIONS))
    pi[np.arange(spec.n_states), np.asarray(actions, dtype=np.int64)] = 1.0
    return pi


def policy_values(spec: GridworldSpec, pi: np.ndarray) -> np.ndarray:
    """Infinite-horizon discounted values of a stochastic policy pi[s, a] (linear solve)."""
    P = spec.transition_matrix()
    P_pi = np.einsum("sa,sat->st", pi, P)
    return np.linalg.solve(np.eye(spec.n_states) - spec.gamma * P_pi, spec.reward_vector())


def exact_return(spec: GridworldSpec, pi: np.ndarray, horizon: int | None = None,
                 start: int | None = None) -> float:
    """Expected discounted return over ``horizon`` steps from the start cell."""
    horizon = spec.horizon if horizon is None else horizon
    P = spec.transition_matrix()
    P_pi = np.einsum("sa,sat->st", pi, P)
    R = spec.reward_vector()
    dist = np.zeros(spec.n_states)
    dist[spec.index(spec.start) if start is None else start] = 1.0
    total, disc = 0.0, 1.0
    for _ in range(horizon):
        total += disc * float(dist @ R)
        dist = dist @ P_pi
        disc *= spec.gamma
    return total


# ------------------------------------------------------- continuous oracles


def gaussian_kl(mu1, cov1, mu2, cov2) -> float:
    """KL(N(mu1, cov1) || N(mu2, cov2)) in closed form."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    d = mu1.shape[0]
    try:
        L1 = np.linalg.cholesky(cov1)
        L2 = np.linalg.cholesky(cov2)
    except np.linalg.LinAlgError:
        raise ValueError("covariances must be symmetric positive definite") from None
    if not (np.allclose(cov1, cov1.T) and np.allclose(cov2, cov2.T)):
        raise ValueError("covariances must be symmetric positive definite")
    inv2 = np.linalg.inv(cov2)
    diff = mu2 - mu1
    logdet1 = 2.0 * np.sum(np.log(np.diag(L1)))
    logdet2 = 2.0 * np.sum(np.log(np.diag(L2)))
    return 0.5 * (float(np.trace(inv2 @ cov1)) + float(diff @ inv2 @ diff) - d + logdet2 - logdet1)


def analytic_transition_kl(spec_src: LinearGaussianSpec, spec_tar: LinearGaussianSpec, s, a):
    """KL(P_src(s'|s,a) || P_tar(s'|s,a)); vectorised over a leading batch dimension."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    single = s.ndim == 1
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    mu1 = spec_src.mean_next(s2, a2)
    mu2 = spec_tar.mean_next(s2, a2)
    k1 = spec_src.region_of(mu1)
    k2 = spec_tar.region_of(mu2)
    R1, R2 = spec_src.region_noise_cov.shape[0], spec_tar.region_noise_cov.shape[0]
    # covariance part of the KL for every region pair, via the scalar routine
    zero = np.zeros(spec_src.d_s)
    table = np.array([[gaussian_kl(zero, spec_src.region_noise_cov[i], zero,
                                   spec_tar.region_noise_cov[j]) for j in range(R2)]
                      for i in range(R1)])
    inv2 = np.linalg.inv(spec_tar.region_noise_cov)
    diff = mu2 - mu1
    quad = 0.5 * np.einsum("ni,nij,nj->n", diff, inv2[k2], diff)
    out = table[k1, k2] + quad
    return float(out[0]) if single else out


def lqr_gain(spec: LinearGaussianSpec, iters: int = 10_000, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Discounted infinite-horizon LQR for the mean dynamics: ``a = -K s - k``.

    The affine term comes from augmenting the state with a constant 1 that
    carries no cost.
    """
    d, m = spec.d_s, spec.d_a
    Aa = np.zeros((d + 1, d + 1))
    Aa[:d, :d] = spec.A
    Aa[:d, d] = spec.b
    Aa[d, d] = 1.0
    Ba = np.vstack([spec.B, np.zeros((1, m))])
    Qa = np.zeros((d + 1, d + 1))
    Qa[:d, :d] = spec.state_cost
    R, g = spec.action_cost, spec.gamma
    P = Qa.copy()
    for _ in range(iters):
        G = R + g * Ba.T @ P @ Ba
        Kfull = g * np.linalg.solve(G, Ba.T @ P @ Aa)
        P_new = Qa + g * Aa.T @ P @ Aa - g * Aa.T @ P @ Ba @ Kfull
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    G = R + g * Ba.T @ P @ Ba
    Kfull = g * np.linalg.solve(G, Ba.T @ P @ Aa)
    return Kfull[:, :d], Kfull[:, d]


# --------------------------------------------------------- behavior policies


def epsilon_greedy(spec: GridworldSpec, greedy: np.ndarray, epsilon: float) -> Policy:
    greedy = np.asarray(greedy, dtype=np.int64)

    def act(s_vec, rng):
        if rng.random() < epsilon:
            return int(rng.integers(N_GRID_ACTIONS))
        return int(greedy[spec.decode_state(s_vec)])

    return act


def linear_feedback(K: np.ndarray, k: np.ndarray | None = None, noise_std: float = 0.0,
                    action_bound: float | None = None) -> Policy:
    K = np.asarray(K, dtype=np.float64)
    k = np.zeros(K.shape[0]) if k is None else np.asarray(k, dtype=np.float64)

    def act(s_vec, rng):
        a = -K @ s_vec - k
        if noise_std > 0:
            a = a + noise_std * rng.standard_normal(a.shape[0])
        if action_bound is not None:
            a = np.clip(a, -action_bound, action_bound)
        return a

    return act


def uniform_random_policy(spec: Spec) -> Policy:
    if isinstance(spec, GridworldSpec):
        return lambda s, rng: int(rng.integers(N_GRID_ACTIONS))
    return lambda s, rng: rng.uniform(-spec.action_bound, spec.action_bound, size=spec.d_a)


def expert_policy(spec: Spec) -> Policy:
    if isinstance(spec, GridworldSpec):
        vi = value_iteration(spec)
        return epsilon_greedy(spec, vi.policy, 0.0)
    K, k = lqr_gain(spec)
    return linear_feedback(K, k)


def reference_returns(spec: Spec, episodes: int, seed: int) -> tuple[float, float]:
    """(J_random, J_expert) by Monte Carlo.

    Both use the per-episode streams of ``seed``, so a policy evaluated with
    the same seed sees the same start states (common random numbers).
    """
    J_r = rollout_returns(spec, uniform_random_policy(spec), episodes, seed).mean
    J_e = rollout_returns(spec, expert_policy(spec), episodes, seed).mean
    return J_r, J_e
