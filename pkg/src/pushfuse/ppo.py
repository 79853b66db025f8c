"""PPO with an asymmetric actor-critic and a state-independent Gaussian policy.

The actor sees only the actor observation; the critic additionally sees
privileged channels. Advantages use GAE and are normalized per batch; the
clipped surrogate, entropy bonus, and value loss are optimized with Adam on
minibatches. Deterministic given the seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBuffer, NumericalError, ShapeError
from .nets import Adam, Mlp, clip_grads_

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 4096
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.clip < 1.0):
            raise ShapeError("clip must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ShapeError("gamma in (0,1], lam in [0,1]")
        if self.epochs < 1 or self.minibatch < 1 or self.lr <= 0.0:
            raise ShapeError("epochs, minibatch, lr must be positive")


class GaussianActor:
    """Tanh MLP emitting the action mean; log-std is a free parameter vector."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: list[int], rng: np.random.Generator, init_log_std: float = -0.7):
        self.mlp = Mlp([obs_dim] + list(hidden) + [act_dim], rng, out_scale=0.01)
        self.log_std = np.full(act_dim, float(init_log_std))
        self.act_dim = act_dim

    def params(self) -> list[np.ndarray]:
        return self.mlp.params() + [self.log_std]

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mu = self.mlp(obs)
        std = np.exp(self.log_std)
        noise = rng.standard_normal(mu.shape)
        actions = mu + std * noise
        logp = self.log_prob_given_mean(mu, actions)
        return actions, logp

    def log_prob_given_mean(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        std = np.exp(self.log_std)
        z = (actions - mu) / std
        return -0.5 * np.sum(z * z, axis=1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.log_prob_given_mean(self.mlp(obs), actions)

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.act_dim * (1.0 + LOG_2PI))


def surrogate_loss(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray, clip: float):
    """Clipped PPO objective (to minimize) and its gradient w.r.t. logp_new."""
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr1 = ratio * adv
    surr2 = clipped * adv
    take1 = surr1 <= surr2
    loss = -float(np.mean(np.where(take1, surr1, surr2)))
    inside = (ratio > 1.0 - clip) & (ratio < 1.0 + clip)
    active = take1 | inside
    dlogp = -np.where(active, ratio * adv, 0.0) / logp_new.shape[0]
    return loss, dlogp, ratio


def actor_loss_and_grads(actor: GaussianActor, obs, actions, logp_old, adv, clip: float, entropy_coef: float):
    """Surrogate minus entropy bonus; returns (loss, grads, stats)."""
    mu, acts = actor.mlp.forward(obs)
    std = np.exp(actor.log_std)
    z = (actions - mu) / std
    logp_new = -0.5 * np.sum(z * z, axis=1) - np.sum(actor.log_std) - 0.5 * actor.act_dim * LOG_2PI
    loss_s, dlogp, ratio = surrogate_loss(logp_new, logp_old, adv, clip)
    # d logp / d mu = z / std ; d logp / d log_std_j = z_j^2 - 1
    grad_mu = dlogp[:, None] * (z / std)
    grad_log_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    grad_log_std -= entropy_coef * np.ones_like(actor.log_std)  # entropy = sum(log_std) + const
    mlp_grads, _ = actor.mlp.backward(acts, grad_mu)
    loss = loss_s - entropy_coef * actor.entropy()
    stats = {
        "approx_kl": float(np.mean(logp_old - logp_new)),
        "clip_frac": float(np.mean((ratio < 1.0 - clip) | (ratio > 1.0 + clip))),
    }
    return loss, mlp_grads + [grad_log_std], stats


def critic_loss_and_grads(critic: Mlp, cobs, returns):
    v, acts = critic.forward(cobs)
    v = v[:, 0]
    err = v - returns
    loss = float(np.mean(err * err))
    grad_v = (2.0 * err / err.shape[0])[:, None]
    grads, _ = critic.backward(acts, grad_v)
    return loss, grads


def compute_gae(rewards, values, terminals, truncs, bootstrap, last_values, gamma: float, lam: float):
    """GAE over a (T, N) rollout.

    rewards/values/terminals/truncs/bootstrap are (T, N); bootstrap holds the
    critic value of the pre-reset observation for rows that ended at step t
    (used when the episode was truncated rather than terminated). last_values
    is (N,), the value of the observation after the final step.
    """
    T, N = rewards.shape
    for arr in (values, terminals, truncs, bootstrap):
        if arr.shape != (T, N):
            raise InvalidBuffer("rollout arrays must share the (T, N) shape")
    adv = np.zeros((T, N))
    running = np.zeros(N)
    for t in range(T - 1, -1, -1):
        ended = terminals[t] | truncs[t]
        v_after = last_values if t == T - 1 else values[t + 1]
        v_next = np.where(terminals[t], 0.0, np.where(truncs[t], bootstrap[t], v_after))
        delta = rewards[t] + gamma * v_next - values[t]
        running = delta + gamma * lam * np.where(ended, 0.0, running)
        adv[t] = running
    returns = adv + values
    return adv, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = float(np.std(adv))
    if std < 1e-12:
        return adv - float(np.mean(adv))
    return (adv - float(np.mean(adv))) / std


class PpoTrainer:
    """Owns the actor/critic optimizers and applies PPO updates to rollouts."""

    def __init__(self, actor: GaussianActor, critic: Mlp, cfg: PpoConfig, seed: int):
        self.actor = actor
        self.critic = critic
        self.cfg = cfg
        self.opt_actor = Adam(actor.params(), lr=cfg.lr)
        self.opt_critic = Adam(critic.params(), lr=cfg.lr)
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.update_count = 0

    KL_STOP = 0.02  # skip remaining epochs once the policy has moved this far

    def update(self, batch: dict, lr_scale: float = 1.0) -> dict:
        """batch holds flat arrays: obs, cobs, actions, logp, adv, returns."""
        cfg = self.cfg
        n = batch["obs"].shape[0]
        adv = normalize_advantages(batch["adv"])
        stats_acc: dict[str, float] = {"actor_loss": 0.0, "value_loss": 0.0, "approx_kl": 0.0, "clip_frac": 0.0}
        count = 0
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            epoch_kl = 0.0
            epoch_mb = 0
            for start in range(0, n, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                loss_a, grads_a, st = actor_loss_and_grads(
                    self.actor, batch["obs"][idx], batch["actions"][idx], batch["logp"][idx],
                    adv[idx], cfg.clip, cfg.entropy_coef,
                )
                loss_c, grads_c = critic_loss_and_grads(self.critic, batch["cobs"][idx], batch["returns"][idx])
                if not (np.isfinite(loss_a) and np.isfinite(loss_c)):
                    raise NumericalError("non-finite PPO loss")
                for g in grads_c:
                    g *= cfg.value_coef
                clip_grads_(grads_a, cfg.grad_clip)
                clip_grads_(grads_c, cfg.grad_clip)
                self.opt_actor.step(self.actor.params(), grads_a, lr_scale)
                self.opt_critic.step(self.critic.params(), grads_c, lr_scale)
                stats_acc["actor_loss"] += loss_a
                stats_acc["value_loss"] += loss_c
                stats_acc["approx_kl"] += st["approx_kl"]
                stats_acc["clip_frac"] += st["clip_frac"]
                epoch_kl += st["approx_kl"]
                epoch_mb += 1
                count += 1
            if epoch_kl / max(epoch_mb, 1) > self.KL_STOP:
                break
        self.update_count += 1
        return {k: v / max(count, 1) for k, v in stats_acc.items()}


class PointMassEnv:
    """Vectorized 1D point mass driven toward the origin; PPO smoke target.

    Reward is -|x| each step; actions are clamped to [-1, 1] and scaled by
    step_size. Critic additionally observes |x|. Episodes truncate at the
    horizon with a value bootstrap, so the interface mirrors the pushing env.
    """

    def __init__(self, num: int, seed: int = 0, horizon: int = 32, step_size: float = 0.1):
        self.num = num
        self.horizon = horizon
        self.step_size = step_size
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.x = self.rng.uniform(-1.0, 1.0, size=num)
        self.t = np.zeros(num, dtype=np.int64)

    def observe(self):
        obs = self.x[:, None].copy()
        cobs = np.stack([self.x, np.abs(self.x)], axis=1)
        return obs, cobs

    def step(self, actions: np.ndarray):
        a = np.clip(np.asarray(actions, dtype=np.float64)[:, 0], -1.0, 1.0) * self.step_size
        self.x = self.x + a
        self.t += 1
        reward = -np.abs(self.x)
        truncated = self.t >= self.horizon
        terminal = np.zeros(self.num, dtype=bool)
        pre_reset = np.stack([self.x, np.abs(self.x)], axis=1)
        if np.any(truncated):
            idx = np.nonzero(truncated)[0]
            self.x[idx] = self.rng.uniform(-1.0, 1.0, size=idx.shape[0])
            self.t[idx] = 0

        class _Step:
            pass

        sb = _Step()
        sb.reward = reward
        sb.terminal = terminal
        sb.truncated = truncated
        sb.pre_reset_critic_obs = pre_reset
        return sb


def point_mass_optimal_return(x0: np.ndarray, horizon: int = 32, step_size: float = 0.1) -> np.ndarray:
    """Return of the greedy policy (full step toward the origin) from each start."""
    x = np.asarray(x0, dtype=np.float64).copy()
    total = np.zeros_like(x)
    for _ in range(horizon):
        x = np.sign(x) * np.maximum(np.abs(x) - step_size, 0.0)
        total += -np.abs(x)
    return total
