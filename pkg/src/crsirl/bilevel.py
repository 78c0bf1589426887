"""Bi-level intrinsic reward learning.

Inner level: one plain policy-gradient step on ``r_ex + lam * r_phi``,

    theta' = theta + eta * sum_t u_t R_t,      u_t = grad_theta ln pi(a_t | s_t)

so that ``d theta' / d phi = eta * lam * sum_t u_t G_t^T`` with
``G_t = sum_{t' >= t} gamma^(t'-t) grad_phi r_phi(s_t', a_t')``. The matrix is
never formed; ``MetaFactors`` keeps the (u_t, G_t) pairs.

Outer level: two losses on theta', a rank-shaped extrinsic loss on a fresh
rollout and a Bradley-Terry preference loss on a buffered pair, combined
with the closed-form two-objective MGDA weight, then pulled back to phi.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from crsirl.catalog import Catalog, EmbeddingTable
from crsirl.env import (
    ConversationState,
    Handcrafted,
    RuleBased,
    Sparse,
    UserSimulator,
    initial_state,
    select_action_space,
    step,
    target_rank,
)
from crsirl.errors import InvalidArgument, NoPairError
from crsirl.intrinsic import RewardParams, feature_length, intrinsic_reward, intrinsic_reward_and_grad, reward_features
from crsirl.params import FlatParams
from crsirl.policy import (
    OptimizerState,
    PolicyParams,
    action_embeddings,
    apply_gradient,
    choice_to_action,
    log_prob_and_grad,
    log_softmax,
    scores_from_features,
    state_features,
)

SCHEMES = ("sparse", "handcrafted", "rules")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    beta: float = 0.01
    lam: float = 0.1
    gamma: float = 0.999
    t_max: int = 15
    k: int = 10
    k_v: int = 10
    k_p: int = 10
    outer_iterations: int = 200
    enable_hrs: bool = True
    enable_rpm: bool = True
    fixed_alpha: float | None = None
    seed: int = 0
    reward: str = "sparse"
    success_reward: float = 1.0
    failure_reward: float = -1.0
    pretrain_episodes: int = 2000
    pg_step_size: float = 0.02
    pg_baseline: bool = False
    h_dim: int = 16
    m: int = 16
    q: int = 16
    buffer_capacity: int = 512
    probe_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidArgument("gamma must lie in [0, 1]")
        if self.lam < 0:
            raise InvalidArgument("lam must be nonnegative")
        if not self.eta > 0:
            raise InvalidArgument("eta must be positive")
        if self.beta < 0:
            raise InvalidArgument("beta must be nonnegative")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise InvalidArgument("fixed_alpha must lie in [0, 1]")
        for name in ("t_max", "k", "k_v", "k_p", "h_dim", "m", "q", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be at least 1")
        for name in ("outer_iterations", "pretrain_episodes", "probe_every"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be nonnegative")
        if self.k_v < self.k:
            raise InvalidArgument("k_v must be at least k")
        if not self.enable_hrs and not self.enable_rpm:
            raise InvalidArgument("at least one of enable_hrs / enable_rpm must be set")
        if self.reward not in SCHEMES:
            raise InvalidArgument(f"reward must be one of {SCHEMES}")

    def scheme(self):
        if self.reward == "sparse":
            return Sparse(self.success_reward, self.failure_reward)
        if self.reward == "handcrafted":
            return Handcrafted()
        return RuleBased(self.k)

    def sparse_scheme(self) -> Sparse:
        return Sparse(self.success_reward, self.failure_reward)


# --------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    state: ConversationState
    action: object
    action_items: tuple[int, ...]
    action_attrs: tuple[int, ...]
    x: np.ndarray
    E_a: np.ndarray
    chosen: int
    u: np.ndarray
    reward_features: np.ndarray
    r_ex: float
    r_in: float
    rank_before: int
    rank_after: int


@dataclass(frozen=True, eq=False)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]
    success: bool
    user: int = -1
    target: int = -1

    @property
    def length(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def truncated(self, n: int) -> Trajectory:
        return replace(self, steps=self.steps[:n])


def _flat(x) -> np.ndarray:
    return x.flat if isinstance(x, FlatParams) else np.asarray(x, dtype=np.float64)


def _like(template, flat: np.ndarray):
    return template.with_flat(flat) if isinstance(template, FlatParams) else flat


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def rollout(
    theta: PolicyParams,
    phi: RewardParams | None,
    pair: tuple[int, int],
    config: TrainConfig,
    rng: np.random.Generator,
    catalog: Catalog,
    emb: EmbeddingTable,
    scheme=None,
    greedy: bool = False,
) -> Trajectory:
    user, target = pair
    if not (0 <= user < catalog.n_users and 0 <= target < catalog.n_items):
        raise InvalidArgument(f"pair {pair} is not in the catalog")
    scheme = config.scheme() if scheme is None else scheme
    sim = UserSimulator.for_target(target, catalog)
    state = initial_state(user, sim, catalog, rng)
    steps, success = [], False
    while True:
        space = select_action_space(state, config.k_v, config.k_p, emb, catalog, config.k)
        if len(space) == 0:
            break
        x = state_features(state, emb, catalog, config.k_v)
        E_a = action_embeddings(space, emb)
        if greedy:
            chosen = int(np.argmax(scores_from_features(theta, x, E_a)))
            _, u = log_prob_and_grad(theta, x, E_a, chosen)
        else:
            logp = log_softmax(scores_from_features(theta, x, E_a))
            chosen = _sample(np.exp(logp), rng)
            _, u = log_prob_and_grad(theta, x, E_a, chosen)
        action = choice_to_action(space, chosen, config.k)
        rank_before = target_rank(state, target, emb, catalog)
        out = step(state, action, sim, scheme, config.t_max, catalog, emb)
        rank_after = target_rank(out.next_state, target, emb, catalog)
        feats = reward_features(state, action, emb, config.t_max)
        r_in = intrinsic_reward(phi, feats) if phi is not None else 0.0
        steps.append(TrajectoryStep(
            state=state, action=action, action_items=space.items, action_attrs=space.attributes,
            x=x, E_a=E_a, chosen=chosen, u=u, reward_features=feats,
            r_ex=out.reward, r_in=r_in, rank_before=rank_before, rank_after=rank_after,
        ))
        state = out.next_state
        if out.done:
            success = out.success
            break
    return Trajectory(tuple(steps), success, user, target)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """``R_t = r_t + gamma R_{t+1}``, computed backwards."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidArgument("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------- inner level


@dataclass(frozen=True, eq=False)
class MetaFactors:
    us: np.ndarray   # (T, |theta|)
    Gs: np.ndarray   # (T, |phi|)
    eta: float
    lam: float

    def contract(self, v: np.ndarray) -> np.ndarray:
        """``v^T d theta' / d phi``."""
        if self.us.shape[0] == 0:
            return np.zeros(self.Gs.shape[1])
        return self.eta * self.lam * ((self.us @ v) @ self.Gs)


def inner_update(theta, phi: RewardParams | None, traj: Trajectory, config: TrainConfig):
    """One policy-gradient step on extrinsic plus weighted intrinsic returns.

    Intrinsic rewards are recomputed from the stored features at ``phi`` so
    that the result is an exact function of ``phi``.
    """
    flat = _flat(theta)
    n_phi = len(phi) if phi is not None else 0
    T = traj.length
    if T == 0:
        return _like(theta, flat.copy()), MetaFactors(np.zeros((0, flat.size)), np.zeros((0, n_phi)), config.eta, config.lam)
    us = np.stack([s.u for s in traj.steps])
    if us.shape[1] != flat.size:
        raise InvalidArgument(f"score gradients have length {us.shape[1]}, parameters {flat.size}")
    r_ex = np.array([s.r_ex for s in traj.steps])
    if phi is not None:
        pairs = [intrinsic_reward_and_grad(phi, s.reward_features) for s in traj.steps]
        r_in = np.array([r for r, _ in pairs])
        grads = np.stack([g for _, g in pairs])
    else:
        r_in = np.zeros(T)
        grads = np.zeros((T, 0))
    R = discounted_returns(r_ex + config.lam * r_in, config.gamma)
    new_flat = flat + config.eta * (us.T @ R)
    Gs = np.zeros_like(grads)
    acc = np.zeros(grads.shape[1])
    for t in range(T - 1, -1, -1):
        acc = grads[t] + config.gamma * acc
        Gs[t] = acc
    return _like(theta, new_flat), MetaFactors(us, Gs, config.eta, config.lam)


# ---------------------------------------------------------------- outer level


def rank_potential(rank) -> np.ndarray:
    """Potential ``-ln(rank + 1)``: higher when the target sits nearer the top."""
    return -np.log(np.asarray(rank, dtype=np.float64) + 1.0)


def shaping_terms(traj: Trajectory, gamma: float) -> np.ndarray:
    before = np.array([s.rank_before for s in traj.steps], dtype=np.float64)
    after = np.array([s.rank_after for s in traj.steps], dtype=np.float64)
    if np.any(before < 1) or np.any(after < 1):
        raise InvalidArgument("trajectory carries invalid target ranks")
    return gamma * rank_potential(after) - rank_potential(before)


def shaped_extrinsic_returns(traj: Trajectory, gamma: float) -> np.ndarray:
    """Hindsight-shaped returns; failed trajectories keep the raw extrinsic returns."""
    for s in traj.steps:
        if s.rank_before is None or s.rank_after is None:
            raise InvalidArgument("trajectory is missing rank traces")
    r = np.array([s.r_ex for s in traj.steps], dtype=np.float64)
    if traj.success:
        r = r + shaping_terms(traj, gamma)
    return discounted_returns(r, gamma)


def _replay(theta, s: TrajectoryStep):
    if s.E_a.shape[0] == 0 or not 0 <= s.chosen < s.E_a.shape[0]:
        raise InvalidArgument("invalid replay token")
    return log_prob_and_grad(theta, s.x, s.E_a, s.chosen)


def outer_extrinsic_loss(theta, traj: Trajectory, gamma: float, shaped: bool = True) -> float:
    """Surrogate ``-sum_t ln pi_theta(a_t|s_t) * R_t`` with the returns held fixed."""
    R = shaped_extrinsic_returns(traj, gamma) if shaped else discounted_returns([s.r_ex for s in traj.steps], gamma)
    return -sum(_replay(theta, s)[0] * Rt for s, Rt in zip(traj.steps, R))


def outer_extrinsic_grad(theta, traj: Trajectory, gamma: float, shaped: bool = True) -> np.ndarray:
    R = shaped_extrinsic_returns(traj, gamma) if shaped else discounted_returns([s.r_ex for s in traj.steps], gamma)
    g = np.zeros(len(_flat(theta)))
    for s, Rt in zip(traj.steps, R):
        g -= _replay(theta, s)[1] * Rt
    return g


def trajectory_log_prob(theta, traj: Trajectory):
    """Sum of step log-probabilities under ``theta`` and its gradient."""
    total, grad = 0.0, np.zeros(len(_flat(theta)))
    for s in traj.steps:
        lp, g = _replay(theta, s)
        total += lp
        grad += g
    return total, grad


def preference_prob_from_sums(s0: float, s1: float) -> float:
    return float(np.exp(s0 - np.logaddexp(s0, s1)))


def preference_prob(theta, tau0: Trajectory, tau1: Trajectory) -> float:
    """Bradley-Terry probability that ``tau0`` is preferred over ``tau1``."""
    return preference_prob_from_sums(trajectory_log_prob(theta, tau0)[0], trajectory_log_prob(theta, tau1)[0])


def preference_loss(theta, pairs) -> float:
    loss = 0.0
    for t0, t1 in pairs:
        s0, s1 = trajectory_log_prob(theta, t0)[0], trajectory_log_prob(theta, t1)[0]
        loss -= s0 - np.logaddexp(s0, s1)
    return float(loss)


def outer_preference_grad(theta, pairs) -> np.ndarray:
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgument("need at least one preference pair")
    g = np.zeros(len(_flat(theta)))
    for t0, t1 in pairs:
        s0, g0 = trajectory_log_prob(theta, t0)
        s1, g1 = trajectory_log_prob(theta, t1)
        p = preference_prob_from_sums(s0, s1)
        g -= (1.0 - p) * (g0 - g1)
    return g


class TrajectoryBuffer:
    """Successes and failures in two FIFO queues sharing one capacity."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise InvalidArgument("buffer capacity must be positive")
        self.capacity = capacity
        self.successes: deque = deque()
        self.failures: deque = deque()
        self._clock = 0

    def __len__(self) -> int:
        return len(self.successes) + len(self.failures)

    def add(self, traj: Trajectory) -> None:
        if traj.length == 0:
            return
        (self.successes if traj.success else self.failures).append((self._clock, traj))
        self._clock += 1
        while len(self) > self.capacity:
            s, f = self.successes, self.failures
            if not f or (s and s[0][0] < f[0][0]):
                s.popleft()
            else:
                f.popleft()

    def success_list(self) -> list[Trajectory]:
        return [t for _, t in self.successes]

    def failure_list(self) -> list[Trajectory]:
        return [t for _, t in self.failures]


def sample_preference_pair(buffer: TrajectoryBuffer, rng: np.random.Generator):
    """(preferred, other) with the other truncated to the preferred length.

    Success over failure first; otherwise a shorter success over a longer one.
    """
    succ, fail = buffer.success_list(), buffer.failure_list()
    if succ and fail:
        s = succ[int(rng.integers(len(succ)))]
        long_enough = [f for f in fail if f.length >= s.length]
        if long_enough:
            f = long_enough[int(rng.integers(len(long_enough)))]
            return s, f.truncated(s.length)
    if len(succ) >= 2:
        a = succ[int(rng.integers(len(succ)))]
        others = [b for b in succ if b.length != a.length]
        if others:
            b = others[int(rng.integers(len(others)))]
            short, long = (a, b) if a.length < b.length else (b, a)
            return short, long.truncated(short.length)
    raise NoPairError("buffer holds no success with a valid comparator")


def mgda_alpha(g_ex, g_p) -> float:
    """Weight on ``g_ex`` of the min-norm point of the segment [g_p, g_ex]."""
    g_ex, g_p = np.asarray(g_ex, dtype=np.float64), np.asarray(g_p, dtype=np.float64)
    if g_ex.shape != g_p.shape:
        raise InvalidArgument("gradients must have the same length")
    diff = g_ex - g_p
    denom = float(diff @ diff)
    if denom < 1e-12:
        return 0.5
    return float(np.clip((g_p - g_ex) @ g_p / denom, 0.0, 1.0))


def meta_gradient(alpha: float, v_ex, v_p, mf: MetaFactors) -> np.ndarray:
    v_ex, v_p = np.asarray(v_ex, dtype=np.float64), np.asarray(v_p, dtype=np.float64)
    if v_ex.shape != v_p.shape or (mf.us.shape[0] and v_ex.shape[0] != mf.us.shape[1]):
        raise InvalidArgument("outer gradients do not match the policy parameter count")
    return mf.contract(alpha * v_ex + (1.0 - alpha) * v_p)


# ------------------------------------------------------------------- training


@dataclass
class TrainerState:
    theta: PolicyParams
    phi: RewardParams
    opt_phi: OptimizerState
    buffer: TrajectoryBuffer
    rng: np.random.Generator


def _pick(pairs, rng):
    return pairs[int(rng.integers(len(pairs)))]


def outer_step(state: TrainerState, config: TrainConfig, catalog: Catalog, emb: EmbeddingTable, pairs) -> dict:
    """One inner update plus one outer update. Mutates ``state``; returns log fields."""
    rng = state.rng
    theta, phi = state.theta, state.phi

    tau_i = rollout(theta, phi, _pick(pairs, rng), config, rng, catalog, emb)
    theta_new, mf = inner_update(theta, phi, tau_i, config)

    tau_o = rollout(theta_new, None, _pick(pairs, rng), config, rng, catalog, emb, scheme=config.sparse_scheme())
    v_ex = outer_extrinsic_grad(theta_new, tau_o, config.gamma, shaped=True)
    loss_ex = -float(np.sum(shaped_extrinsic_returns(tau_o, config.gamma))) if tau_o.length else 0.0

    try:
        pair = sample_preference_pair(state.buffer, rng)
    except NoPairError:
        pair = None
    if pair is not None:
        v_p = outer_preference_grad(theta_new, [pair])
        loss_p = preference_loss(theta_new, [pair])
    else:
        v_p, loss_p = np.zeros_like(v_ex), float("nan")

    if config.fixed_alpha is not None:
        # fixed weights stay fixed; a missing pair just contributes a zero term
        alpha, live = config.fixed_alpha, True
    elif pair is None:
        alpha = 1.0 if config.enable_hrs else 0.0
        live = config.enable_hrs
    elif not config.enable_rpm:
        alpha, live = 1.0, True
    elif not config.enable_hrs:
        alpha, live = 0.0, True
    else:
        alpha, live = mgda_alpha(v_ex, v_p), True

    if live:
        g = meta_gradient(alpha, v_ex, v_p, mf)
        state.phi, state.opt_phi = apply_gradient(phi, g, state.opt_phi)
    state.theta = theta_new
    state.buffer.add(tau_i)
    state.buffer.add(tau_o)
    return {
        "alpha": alpha,
        "loss_ex": loss_ex,
        "loss_p": loss_p,
        "buffer_succ": len(state.buffer.successes),
        "buffer_fail": len(state.buffer.failures),
    }


def reinforce_grad(traj: Trajectory, gamma: float, baseline: float = 0.0) -> np.ndarray:
    """Gradient of ``-sum_t ln pi(a_t|s_t) (R_t - b)`` from the recorded score gradients."""
    R = discounted_returns([s.r_ex for s in traj.steps], gamma) - baseline
    return -(np.stack([s.u for s in traj.steps]).T @ R)


def init_policy(config: TrainConfig, emb: EmbeddingTable) -> PolicyParams:
    return PolicyParams.init(emb.dim, config.h_dim, config.m, seed=config.seed)


def init_reward(config: TrainConfig, emb: EmbeddingTable) -> RewardParams:
    return RewardParams.init(feature_length(emb.dim), config.q, seed=config.seed + 1)


def pretrain_pg(config: TrainConfig, catalog: Catalog, emb: EmbeddingTable, train_pairs,
                theta_init: PolicyParams | None = None) -> PolicyParams:
    """REINFORCE on the extrinsic reward only, with Adam."""
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise InvalidArgument("no training pairs")
    theta = init_policy(config, emb) if theta_init is None else theta_init.copy()
    opt = OptimizerState.zeros(len(theta), config.pg_step_size)
    rng = np.random.default_rng([config.seed, 101])
    baseline = 0.0
    for _ in range(config.pretrain_episodes):
        traj = rollout(theta, None, _pick(train_pairs, rng), config, rng, catalog, emb)
        if traj.length == 0:
            continue
        g = reinforce_grad(traj, config.gamma, baseline if config.pg_baseline else 0.0)
        theta, opt = apply_gradient(theta, g, opt)
        if config.pg_baseline:
            R0 = discounted_returns([s.r_ex for s in traj.steps], config.gamma)[0]
            baseline = 0.9 * baseline + 0.1 * R0
    return theta


def continue_pg(config: TrainConfig, catalog: Catalog, emb: EmbeddingTable, theta: PolicyParams,
                train_pairs, iterations: int | None = None) -> PolicyParams:
    """Fine-tune with the same plain inner step as the bi-level trainer but no intrinsic reward."""
    train_pairs = list(train_pairs)
    iterations = config.outer_iterations if iterations is None else iterations
    rng = np.random.default_rng([config.seed, 202])
    plain = replace(config, lam=0.0)
    for _ in range(iterations):
        traj = rollout(theta, None, _pick(train_pairs, rng), config, rng, catalog, emb)
        theta, _ = inner_update(theta, None, traj, plain)
    return theta


LOG_COLUMNS = ("iteration", "alpha", "loss_ex", "loss_p", "buffer_succ", "buffer_fail",
               "probe_sr", "probe_at", "probe_hdcg", "wall_ms")


def train_crsirl(
    config: TrainConfig,
    catalog: Catalog,
    emb: EmbeddingTable,
    theta_init: PolicyParams,
    train_pairs,
    probe_pairs=None,
    phi_init: RewardParams | None = None,
    on_checkpoint=None,
    checkpoint_every: int = 0,
):
    """Run ``config.outer_iterations`` outer steps. Returns (theta, phi, logs)."""
    from crsirl.metrics import evaluate_learned

    train_pairs = list(train_pairs)
    if not train_pairs:
        raise InvalidArgument("no training pairs")
    phi = init_reward(config, emb) if phi_init is None else phi_init.copy()
    state = TrainerState(
        theta=theta_init.copy(),
        phi=phi,
        opt_phi=OptimizerState.zeros(len(phi), config.beta),
        buffer=TrajectoryBuffer(config.buffer_capacity),
        rng=np.random.default_rng([config.seed, 303]),
    )
    logs = []
    for it in range(1, config.outer_iterations + 1):
        t0 = time.perf_counter()
        row = {"iteration": it, **outer_step(state, config, catalog, emb, train_pairs)}
        row.update(probe_sr="", probe_at="", probe_hdcg="")
        if probe_pairs and config.probe_every and it % config.probe_every == 0:
            rep = evaluate_learned(state.theta, probe_pairs, config, [config.seed], catalog, emb)
            row.update(probe_sr=rep.sr_at_T, probe_at=rep.at, probe_hdcg=rep.hdcg)
        row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        logs.append(row)
        if on_checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
            on_checkpoint(it, state.theta, state.phi)
    return state.theta, state.phi, logs
