"""Clipped-surrogate policy optimisation over vectorised intersection envs."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .envs import DurationEnv, IntersectionEnv
from .features import random_permutations, shuffle_batch
from .neuralnet import (
    NetworkParams,
    OptimizerState,
    adam_step,
    backward,
    clip_by_global_norm,
    forward,
    init_params,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
)
from .topology import ScenarioSpec

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatch: int = 64
    rollout_len: int = 128
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    total_steps: int = 100_000
    augment: bool = True
    n_envs: Optional[int] = None
    gae_lambda: Optional[float] = None
    seed: int = 0
    episode_s: Optional[int] = None
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")


@dataclass
class RolloutBuffer:
    """Arrays shaped (T, n_envs, ...) for one collection round."""

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episodes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.actions.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


@dataclass
class UpdateMetrics:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float = 0.0


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    logp = log_softmax(logits.astype(np.float64))
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((logits.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=1), logits.shape[1] - 1)


def collect(
    envs: Sequence[IntersectionEnv],
    params: NetworkParams,
    rollout_len: int,
    rng: np.random.Generator,
    pool: Optional[ThreadPoolExecutor] = None,
) -> RolloutBuffer:
    """Run ``rollout_len`` decisions in every env with the current policy.

    Envs must already be reset; finished episodes reset automatically and
    are reported in ``buffer.episodes``.
    """
    n = len(envs)
    T = rollout_len
    states = np.zeros((T, n, 8, 8), dtype=np.float32)
    actions = np.zeros((T, n), dtype=np.int64)
    log_probs = np.zeros((T, n), dtype=np.float32)
    rewards = np.zeros((T, n), dtype=np.float32)
    values = np.zeros((T, n), dtype=np.float32)
    next_values = np.zeros((T, n), dtype=np.float32)
    dones = np.zeros((T, n), dtype=bool)
    episodes = []

    def run(i_a):
        i, a = i_a
        env = envs[i]
        try:
            return env.step(a)
        except Exception as exc:  # keep the env identity in the traceback
            raise RuntimeError(f"env {i} ({env.id}) failed: {exc}") from exc

    cur = np.stack([e.state for e in envs]).astype(np.float32)
    logits, v, _ = forward(params, cur)
    for t in range(T):
        a = sample_actions(logits, rng)
        logp = log_softmax(logits.astype(np.float64))
        states[t] = cur
        actions[t] = a
        log_probs[t] = logp[np.arange(n), a]
        values[t] = v
        jobs = list(enumerate(a.tolist()))
        results = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
        for i, (s, r, d, info) in enumerate(results):
            rewards[t, i] = r
            dones[t, i] = d
            if d:
                episodes.append(
                    {
                        "env": envs[i].id,
                        "raw_return": info["episode_raw_return"],
                        "decisions": info["episode_decisions"],
                        "avg_waiting_s": info["metrics"].avg_waiting_s,
                    }
                )
                s = envs[i].reset()
            cur[i] = s
        logits, v, _ = forward(params, cur)
        next_values[t] = v
    return RolloutBuffer(states, actions, log_probs, rewards, values, next_values, dones, episodes=episodes)


def advantage(buffer: RolloutBuffer, gamma: float, gae_lambda: Optional[float] = None) -> None:
    """One-step TD advantages (GAE when ``gae_lambda`` is given) and value targets."""
    nonterm = 1.0 - buffer.dones.astype(np.float64)
    r = buffer.rewards.astype(np.float64)
    v = buffer.values.astype(np.float64)
    delta = r + gamma * buffer.next_values.astype(np.float64) * nonterm - v
    if gae_lambda is None:
        adv = delta
    else:
        adv = np.zeros_like(delta)
        last = np.zeros(delta.shape[1])
        for t in range(delta.shape[0] - 1, -1, -1):
            last = delta[t] + gamma * gae_lambda * nonterm[t] * last
            adv[t] = last
    buffer.advantages = adv
    buffer.returns = adv + v


def clipped_surrogate(ratio, adv, clip_eps):
    """Per-sample ``min(r*A, clip(r, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)


def ppo_loss_and_grads(params: NetworkParams, states, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Loss terms and parameter gradients for one minibatch."""
    B = states.shape[0]
    logits, values, cache = forward(params, states)
    logits = logits.astype(np.float64)
    values = values.astype(np.float64)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    idx = np.arange(B)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()
    value_loss = ((values - returns) ** 2).mean()
    entropy_each = -(probs * logp_all).sum(axis=1)
    entropy = entropy_each.mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite PPO loss (policy={policy_loss}, value={value_loss}, entropy={entropy})"
        )

    # d loss / d logp(a): only where the unclipped branch is the minimum
    active = surr1 <= surr2
    dlogp = np.where(active, -adv * ratio, 0.0) / B
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    # entropy bonus: dH/dz_j = -p_j (log p_j + H)
    dlogits += cfg.entropy_coef / B * probs * (logp_all + entropy_each[:, None])
    dvalues = cfg.value_coef * 2.0 * (values - returns) / B
    grads = backward(params, cache, dlogits, dvalues)
    stats = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float((np.abs(ratio - 1) > cfg.clip_eps).mean()),
        "approx_kl": float((old_logp - logp).mean()),
        "ratio": ratio,
    }
    return stats, grads


def update(
    params: NetworkParams,
    opt: OptimizerState,
    buffer: RolloutBuffer,
    cfg: PPOConfig,
    rng: np.random.Generator,
    aug_rng: Optional[np.random.Generator] = None,
    permutation_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
) -> UpdateMetrics:
    """Several epochs of minibatch Adam steps on the clipped objective.

    With ``cfg.augment`` every sampled state gets its own fresh random row
    permutation (drawn from ``aug_rng``) before the forward pass.
    """
    states = buffer.flat("states")
    actions = buffer.flat("actions")
    old_logp = buffer.flat("log_probs").astype(np.float64)
    adv = buffer.flat("advantages")
    returns = buffer.flat("returns")
    if adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    sampler = permutation_sampler or random_permutations
    aug_rng = aug_rng if aug_rng is not None else rng
    M = len(actions)
    mb = min(cfg.minibatch, M)
    acc = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "approx_kl": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(M)
        for start in range(0, M, mb):
            idx = order[start:start + mb]
            s = states[idx]
            if cfg.augment:
                s = shuffle_batch(s, sampler(aug_rng, len(idx)))
            stats, grads = ppo_loss_and_grads(params, s, actions[idx], old_logp[idx], adv[idx], returns[idx], cfg)
            clip_by_global_norm(grads, cfg.max_grad_norm)
            adam_step(params, grads, opt)
            for k in acc:
                acc[k].append(stats[k])
    return UpdateMetrics(**{k: float(np.mean(v)) for k, v in acc.items()})


CURVE_FIELDS = (
    "iteration", "env_steps", "mean_episode_reward", "policy_loss", "value_loss",
    "entropy", "clip_fraction", "mean_episode_waiting_s", "episodes",
    "eval_reward", "eval_waiting_s", "mean_decision_reward",
)


@dataclass
class TrainResult:
    params: NetworkParams
    opt: OptimizerState
    curve: list[dict]
    env_steps: int


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def make_envs(scenarios: Sequence[ScenarioSpec], cfg: PPOConfig, env_cls=DurationEnv) -> list:
    n = cfg.n_envs or len(scenarios)
    return [
        env_cls(scenarios[i % len(scenarios)], seed=cfg.seed * 1000 + i, duration_s=cfg.episode_s)
        for i in range(n)
    ]


def train(
    cfg: PPOConfig,
    scenarios: Sequence[ScenarioSpec],
    params: Optional[NetworkParams] = None,
    opt: Optional[OptimizerState] = None,
    env_cls=DurationEnv,
    curve_path=None,
    permutation_sampler=None,
    evaluator: Optional[Callable[[NetworkParams], dict]] = None,
    eval_every: int = 0,
) -> TrainResult:
    """Alternate collection and updates until ``cfg.total_steps`` decisions.

    ``evaluator(params)`` (returning ``eval_reward`` and ``eval_waiting_s``)
    runs before training, after every ``eval_every`` env steps and at the
    end; its values land in the curve rows.
    """
    init_rng, act_rng, mb_rng, aug_rng = _streams(cfg.seed)
    envs = make_envs(scenarios, cfg, env_cls)
    n_actions = envs[0].n_actions
    if any(e.n_actions != n_actions for e in envs):
        raise ValueError("all environments must share one action space")
    if params is None:
        params = init_params(init_rng, n_actions)
    elif params.n_actions != n_actions:
        raise ValueError(f"network has {params.n_actions} actions, environment needs {n_actions}")
    if opt is None:
        opt = OptimizerState.for_params(params, cfg.lr)
    stats = opt.reward_stats
    if stats is not None and stats.shape == (len(envs), 3):
        for e, (count, mean, m2) in zip(envs, stats.astype(np.float64)):
            e.normalizer.count, e.normalizer.mean, e.normalizer.m2 = int(count), mean, m2
    for e in envs:
        e.reset()
    curve = []
    steps = 0
    it = 0
    last_reward = float("nan")
    last_wait = float("nan")
    # episode returns sum one term per decision, so policies that switch more
    # often collect more terms; the per-decision mean is comparable across them
    last_per_decision = float("nan")
    next_eval = eval_every if eval_every > 0 else None
    if evaluator is not None:
        curve.append({"iteration": 0, "env_steps": 0, "episodes": 0, **evaluator(params)})
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        while steps < cfg.total_steps:
            T = min(cfg.rollout_len, math.ceil((cfg.total_steps - steps) / len(envs)))
            buf = collect(envs, params, T, act_rng, pool)
            steps += buf.size
            advantage(buf, cfg.gamma, cfg.gae_lambda)
            m = update(params, opt, buf, cfg, mb_rng, aug_rng, permutation_sampler)
            it += 1
            if buf.episodes:
                last_reward = float(np.mean([e["raw_return"] for e in buf.episodes]))
                last_wait = float(np.mean([e["avg_waiting_s"] for e in buf.episodes]))
                last_per_decision = float(np.mean([e["raw_return"] / e["decisions"] for e in buf.episodes]))
            row = {
                "iteration": it,
                "env_steps": steps,
                "mean_episode_reward": last_reward,
                "policy_loss": m.policy_loss,
                "value_loss": m.value_loss,
                "entropy": m.entropy,
                "clip_fraction": m.clip_fraction,
                "mean_episode_waiting_s": last_wait,
                "episodes": len(buf.episodes),
                "mean_decision_reward": last_per_decision,
            }
            if evaluator is not None:
                due = next_eval is not None and steps >= next_eval
                if due or steps >= cfg.total_steps:
                    row.update(evaluator(params))
                while next_eval is not None and steps >= next_eval:
                    next_eval += eval_every
            curve.append(row)
            log.info("iter %d steps %d reward %.1f wait %.2f entropy %.3f", it, steps, last_reward, last_wait, m.entropy)
    finally:
        if pool:
            pool.shutdown()
    opt.reward_stats = np.array([[e.normalizer.count, e.normalizer.mean, e.normalizer.m2] for e in envs])
    if curve_path is not None:
        write_curve(curve, curve_path)
    return TrainResult(params, opt, curve, steps)


def retrain(checkpoint, scenario: ScenarioSpec, cfg: PPOConfig, curve_path=None, **kwargs) -> TrainResult:
    """Continue training a saved universal model on a single intersection."""
    params, opt = load_checkpoint(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    if params.n_actions != DurationEnv.n_actions:
        raise ValueError(f"checkpoint has {params.n_actions} actions; duration agent needs {DurationEnv.n_actions}")
    if opt is None:
        opt = OptimizerState.for_params(params, cfg.lr)
    cfg = PPOConfig(**{**asdict(cfg), "n_envs": cfg.n_envs or 1})
    return train(cfg, [scenario], params=params.copy(), opt=opt.copy(), curve_path=curve_path, **kwargs)


def write_curve(curve: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def save(result: TrainResult, path) -> None:
    save_checkpoint(result.params, result.opt, path)
