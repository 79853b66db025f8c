"""Run orchestration: config parsing, training phases, evaluation, reports.

A run directory holds config.json, checkpoints/, metrics/, and traces/. All
emitted artifacts embed the config hash; metrics JSON is byte-reproducible for
a given config and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .env import EpisodeRecord, PushingEnv, TaskConfig, batch_rollout
from .errors import InvalidConfig, MissingArtifact
from .estimator import (
    AdaptationEnsemble,
    HistoryWindow,
    ParamEstimate,
    WindowDataset,
    aggregate_prior,
    load_prior_set,
    train_ensemble,
    windows_from_records,
)
from .geometry import RigidObjectSpec, make_hammer, spec_from_dict, spec_to_dict, tblock_with_weight
from .nets import Mlp
from .ppo import GaussianActor, PpoConfig, PpoTrainer, compute_gae
from .sim import SimParams

METHODS = ("fused", "privileged", "prior_only", "rma_only", "dr")

ACTOR_DIV = np.array([0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 0.05, 1.0, 1.0])
CRITIC_DIV = np.concatenate([ACTOR_DIV, [0.2, 0.2, 1.0, 0.05]])

DEFAULT_ABLATION_RUNGS = (
    (0.06, 0.01),
    (0.04, 0.02),
    (0.02, 0.04),
    (0.00, 0.06),
    (-0.02, 0.08),
)


@dataclass(frozen=True)
class TrainBudget:
    """How much compute each phase gets."""

    num_envs: int = 256
    rollout_steps: int = 64
    phase1_updates: int = 500
    phase15_updates: int = 60
    dr_updates: int = 500
    ensemble_episodes: int = 128
    ensemble_epochs: int = 30
    ensemble_batch: int = 512
    ensemble_lr: float = 1e-3
    policy_hidden: tuple[int, int] = (128, 128)
    ensemble_hidden: tuple[int, int] = (128, 128)
    init_log_std: float = -0.7
    # optimization-side scaling only; logged returns and rewards stay raw
    return_scale: float = 0.05
    # ramp length for the orientation penalty (fraction of updates), applied
    # once the policy reliably reaches the goal; from-scratch training only,
    # fine-tuning keeps the full weight
    ang_anneal_frac: float = 0.2

    def __post_init__(self):
        for name in ("num_envs", "rollout_steps", "phase1_updates", "phase15_updates",
                     "dr_updates", "ensemble_episodes", "ensemble_epochs", "ensemble_batch"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"budget.{name} must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    object_name: str = "tblock"
    object_doc: dict | None = None
    com_range: tuple[float, float] = (-0.035, 0.075)
    goal_pose: tuple[float, float, float] = (0.40, 0.0, 0.0)
    episode_horizon: int = 400
    success_pos_tol: float = 0.03
    success_ang_tol_deg: float = 20.0
    success_hold_s: float = 0.0
    init_theta_range_deg: float = 180.0
    phase15_sigma: float = 0.015
    window_k: int = 20
    ensemble_n: int = 10
    sim: SimParams = field(default_factory=SimParams)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    budget: TrainBudget = field(default_factory=TrainBudget)
    prior_file: str | None = None
    prior_inline: tuple[float, float] | None = (0.040, 0.014)
    method: str = "fused"
    trials: int = 48
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_com: float = 0.060
    orientation_grid_deg: float = 45.0
    eval_jitter_pos: float = 0.01
    eval_jitter_deg: float = 10.0
    ablation_rungs: tuple[tuple[float, float], ...] = DEFAULT_ABLATION_RUNGS
    ablation_trials: int = 24

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {self.method!r}")
        if self.trials < 1 or self.ablation_trials < 1:
            raise InvalidConfig("trials counts must be >= 1")
        if len(self.seeds) < 1:
            raise InvalidConfig("need at least one seed")
        if self.ensemble_n < 2:
            raise InvalidConfig("ensemble_n must be >= 2")
        if self.window_k < 1:
            raise InvalidConfig("window_k must be >= 1")
        lo, hi = self.com_range
        if not (lo < hi):
            raise InvalidConfig("com_range must satisfy lo < hi")
        if not (lo <= self.eval_com <= hi):
            raise InvalidConfig("eval_com must sit inside com_range")
        if self.prior_file is None and self.prior_inline is None:
            raise InvalidConfig("need prior_file or prior_inline")

    def object_spec(self) -> RigidObjectSpec:
        if self.object_doc is not None:
            return spec_from_dict(self.object_doc)
        if self.object_name == "tblock":
            return tblock_with_weight()
        if self.object_name == "hammer":
            return make_hammer()
        raise InvalidConfig(f"unknown object {self.object_name!r} and no inline spec")

    def task(self, mode: str, fixed_value: float | None = None, noise_sigma: float | None = None) -> TaskConfig:
        return TaskConfig(
            object_spec=self.object_spec(),
            com_range=self.com_range,
            goal_pose=self.goal_pose,
            episode_horizon=self.episode_horizon,
            success_pos_tol=self.success_pos_tol,
            success_ang_tol=math.radians(self.success_ang_tol_deg),
            success_hold_s=self.success_hold_s,
            conditioning_mode=mode,
            noise_sigma=self.phase15_sigma if noise_sigma is None else noise_sigma,
            fixed_conditioning_value=fixed_value,
            init_theta_range=math.radians(self.init_theta_range_deg),
        )

    def prior(self) -> ParamEstimate:
        if self.prior_file is not None:
            return aggregate_prior(load_prior_set(self.prior_file))
        value, sigma = self.prior_inline
        return ParamEstimate(value=value, variance=sigma * sigma, source="prior")


def _dict_to_dataclass(cls, doc: dict, label: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise InvalidConfig(f"unknown {label} keys: {sorted(unknown)}")
    fixed = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        v = doc[f.name]
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        fixed[f.name] = v
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad {label}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("config document must be a JSON object")
    doc = dict(doc)
    sub = {}
    for key, cls in (("sim", SimParams), ("ppo", PpoConfig), ("budget", TrainBudget)):
        if key in doc:
            entry = doc.pop(key)
            if not isinstance(entry, dict):
                raise InvalidConfig(f"{key} section must be an object")
            sub[key] = _dict_to_dataclass(cls, entry, key)
    cfg = _dict_to_dataclass(RunConfig, {**doc, **sub}, "config")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as exc:
        raise InvalidConfig(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    return doc


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_config(cfg: RunConfig, run_dir: Path) -> str:
    run_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    doc = config_to_dict(cfg)
    doc["config_hash"] = h
    with open(run_dir / "config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return h


class PolicyBundle:
    """Actor + critic + fixed observation scalings, checkpointable as tensors."""

    def __init__(self, actor: GaussianActor, critic: Mlp, actor_div: np.ndarray, critic_div: np.ndarray):
        self.actor = actor
        self.critic = critic
        self.actor_div = np.asarray(actor_div, dtype=np.float64)
        self.critic_div = np.asarray(critic_div, dtype=np.float64)

    @classmethod
    def fresh(cls, obs_dim: int, cobs_dim: int, act_dim: int, hidden, seed: int,
              actor_div=None, critic_div=None, init_log_std: float = -0.7) -> "PolicyBundle":
        s1, s2 = np.random.SeedSequence(seed).spawn(2)
        actor = GaussianActor(obs_dim, act_dim, list(hidden), np.random.Generator(np.random.PCG64(s1)), init_log_std)
        critic = Mlp([cobs_dim] + list(hidden) + [1], np.random.Generator(np.random.PCG64(s2)))
        if actor_div is None:
            actor_div = np.ones(obs_dim)
        if critic_div is None:
            critic_div = np.ones(cobs_dim)
        return cls(actor, critic, actor_div, critic_div)

    def act_mean(self, obs_raw: np.ndarray) -> np.ndarray:
        return self.actor.mean(obs_raw / self.actor_div)

    def sample(self, obs_raw: np.ndarray, rng: np.random.Generator):
        scaled = obs_raw / self.actor_div
        actions, logp = self.actor.sample(scaled, rng)
        return actions, logp, scaled

    def value(self, cobs_raw: np.ndarray) -> np.ndarray:
        return self.critic(cobs_raw / self.critic_div)[:, 0]

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"actor_div": self.actor_div, "critic_div": self.critic_div, "log_std": self.actor.log_std}
        for i, (w, b) in enumerate(zip(self.actor.mlp.weights, self.actor.mlp.biases)):
            out[f"actor.w{i}"] = w
            out[f"actor.b{i}"] = b
        for i, (w, b) in enumerate(zip(self.critic.weights, self.critic.biases)):
            out[f"critic.w{i}"] = w
            out[f"critic.b{i}"] = b
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.actor_div = tensors["actor_div"].copy()
        self.critic_div = tensors["critic_div"].copy()
        self.actor.log_std[...] = tensors["log_std"]
        for i in range(len(self.actor.mlp.weights)):
            self.actor.mlp.weights[i][...] = tensors[f"actor.w{i}"]
            self.actor.mlp.biases[i][...] = tensors[f"actor.b{i}"]
        for i in range(len(self.critic.weights)):
            self.critic.weights[i][...] = tensors[f"critic.w{i}"]
            self.critic.biases[i][...] = tensors[f"critic.b{i}"]


def fresh_task_bundle(cfg: RunConfig, seed: int) -> PolicyBundle:
    return PolicyBundle.fresh(
        obs_dim=9, cobs_dim=13, act_dim=2, hidden=cfg.budget.policy_hidden, seed=seed,
        actor_div=ACTOR_DIV, critic_div=CRITIC_DIV, init_log_std=cfg.budget.init_log_std,
    )


def save_policy(path, bundle: PolicyBundle, trainer: PpoTrainer | None, cfg_hash: str, metadata: dict) -> None:
    tensors = bundle.to_tensors()
    if trainer is not None:
        for k, v in trainer.opt_actor.state_tensors().items():
            tensors[f"adam_actor.{k}"] = v
        for k, v in trainer.opt_critic.state_tensors().items():
            tensors[f"adam_critic.{k}"] = v
        metadata = {**metadata, "update_count": trainer.update_count}
    save_checkpoint(path, tensors, cfg_hash, metadata)


def load_policy(path, cfg: RunConfig) -> tuple[PolicyBundle, dict, dict]:
    tensors, header = load_checkpoint(path)
    bundle = fresh_task_bundle(cfg, seed=0)
    bundle.load_tensors(tensors)
    return bundle, tensors, header


def collect_rollout(env, bundle: PolicyBundle, steps: int, rng: np.random.Generator, ppo_cfg: PpoConfig,
                    return_scale: float = 1.0):
    """Gather a (T, N) on-policy rollout and compute GAE targets.

    return_scale multiplies rewards entering GAE so value targets stay O(1);
    episode statistics are reported on raw rewards.
    """
    T, N = steps, env.num
    obs_buf = np.zeros((T, N, bundle.actor_div.shape[0]))
    cobs_buf = np.zeros((T, N, bundle.critic_div.shape[0]))
    act_buf = np.zeros((T, N, bundle.actor.act_dim))
    logp_buf = np.zeros((T, N))
    rew_buf = np.zeros((T, N))
    term_buf = np.zeros((T, N), dtype=bool)
    trunc_buf = np.zeros((T, N), dtype=bool)
    boot_obs = np.zeros((T, N, bundle.critic_div.shape[0]))
    ep_returns: list[float] = []
    ep_lens: list[int] = []
    ep_succ: list[bool] = []
    acc_ret = getattr(env, "_acc_return", np.zeros(N))
    acc_len = getattr(env, "_acc_len", np.zeros(N, dtype=np.int64))

    for t in range(T):
        obs_raw, cobs_raw = env.observe()
        actions, logp, scaled = bundle.sample(obs_raw, rng)
        sb = env.step(actions)
        obs_buf[t] = scaled
        cobs_buf[t] = cobs_raw / bundle.critic_div
        act_buf[t] = actions
        logp_buf[t] = logp
        rew_buf[t] = sb.reward
        term_buf[t] = sb.terminal
        trunc_buf[t] = sb.truncated
        boot_obs[t] = sb.pre_reset_critic_obs / bundle.critic_div
        acc_ret += sb.reward
        acc_len += 1
        ended = sb.terminal | sb.truncated
        if np.any(ended):
            idx = np.nonzero(ended)[0]
            ep_returns.extend(acc_ret[idx].tolist())
            ep_lens.extend(acc_len[idx].tolist())
            ep_succ.extend(sb.terminal[idx].tolist())
            acc_ret[idx] = 0.0
            acc_len[idx] = 0
    env._acc_return = acc_ret
    env._acc_len = acc_len

    flat_cobs = cobs_buf.reshape(T * N, -1)
    values = bundle.critic(flat_cobs)[:, 0].reshape(T, N)
    bootstrap = bundle.critic(boot_obs.reshape(T * N, -1))[:, 0].reshape(T, N)
    _, cobs_now = env.observe()
    last_values = bundle.critic(cobs_now / bundle.critic_div)[:, 0]
    adv, returns = compute_gae(rew_buf * return_scale, values, term_buf, trunc_buf, bootstrap, last_values,
                               ppo_cfg.gamma, ppo_cfg.lam)
    batch = {
        "obs": obs_buf.reshape(T * N, -1),
        "cobs": flat_cobs,
        "actions": act_buf.reshape(T * N, -1),
        "logp": logp_buf.reshape(T * N),
        "adv": adv.reshape(T * N),
        "returns": returns.reshape(T * N),
    }
    stats = {
        "ep_return_mean": float(np.mean(ep_returns)) if ep_returns else float("nan"),
        "ep_len_mean": float(np.mean(ep_lens)) if ep_lens else float("nan"),
        "ep_success_rate": float(np.mean(ep_succ)) if ep_succ else float("nan"),
        "episodes": len(ep_returns),
    }
    return batch, stats


def train_policy(env, bundle: PolicyBundle, ppo_cfg: PpoConfig, updates: int, rollout_steps: int, seed: int,
                 log_rows: list | None = None, return_scale: float = 1.0,
                 ang_anneal_frac: float = 0.0) -> PpoTrainer:
    """Run PPO updates on a vectorized env; returns the trainer (optimizer state)."""
    ss = np.random.SeedSequence(seed)
    s_tr, s_act = ss.generate_state(2)
    trainer = PpoTrainer(bundle.actor, bundle.critic, ppo_cfg, seed=int(s_tr))
    rng = np.random.Generator(np.random.PCG64(int(s_act)))
    anneal_updates = int(round(ang_anneal_frac * updates))
    anneal = anneal_updates > 0 and hasattr(env, "reward_ang_scale")
    succ_ema: float | None = None
    ramp_start: int | None = None
    steps_done = 0
    for u in range(updates):
        if anneal:
            # hold the orientation penalty at zero until the policy reliably
            # reaches the goal, then ramp it in; annealing from the start stalls
            # learning in the do-nothing optimum (rotation costs swamp early
            # translation gains)
            if ramp_start is None:
                env.reward_ang_scale = 0.0
                if succ_ema is not None and succ_ema >= 0.5:
                    ramp_start = u
            else:
                env.reward_ang_scale = min(1.0, (u - ramp_start) / anneal_updates)
        batch, roll_stats = collect_rollout(env, bundle, rollout_steps, rng, ppo_cfg, return_scale)
        # linear decay keeps late updates small; floor leaves room for fine-tuning
        lr_scale = 1.0 - 0.7 * u / max(updates - 1, 1)
        stats = trainer.update(batch, lr_scale)
        steps_done += rollout_steps * env.num
        if roll_stats["episodes"] > 0:
            s = roll_stats["ep_success_rate"]
            succ_ema = s if succ_ema is None else 0.7 * succ_ema + 0.3 * s
        if log_rows is not None:
            log_rows.append(
                {
                    "update": u + 1,
                    "env_steps": steps_done,
                    "ep_return_mean": roll_stats["ep_return_mean"],
                    "ep_len_mean": roll_stats["ep_len_mean"],
                    "ep_success_rate": roll_stats["ep_success_rate"],
                    "episodes": roll_stats["episodes"],
                    "actor_loss": stats["actor_loss"],
                    "value_loss": stats["value_loss"],
                    "approx_kl": stats["approx_kl"],
                    "clip_frac": stats["clip_frac"],
                }
            )
    if hasattr(env, "reward_ang_scale"):
        env.reward_ang_scale = 1.0
    return trainer


def write_curve_csv(path, rows: list[dict], cfg_hash: str) -> None:
    cols = ["update", "env_steps", "ep_return_mean", "ep_len_mean", "ep_success_rate", "episodes",
            "actor_loss", "value_loss", "approx_kl", "clip_frac"]
    with open(path, "w") as f:
        f.write(f"# config_hash={cfg_hash}\n")
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(f"{r[c]:.9g}" if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")


def _run_dirs(out_dir) -> dict[str, Path]:
    run_dir = Path(out_dir)
    dirs = {
        "run": run_dir,
        "checkpoints": run_dir / "checkpoints",
        "metrics": run_dir / "metrics",
        "traces": run_dir / "traces",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def run_train_phase1(cfg: RunConfig, out_dir, seed: int) -> Path:
    """Train the conditioned policy on true parameters (or a DR policy when method=dr)."""
    dirs = _run_dirs(out_dir)
    h = write_config(cfg, dirs["run"])
    dr = cfg.method == "dr"
    mode = "none" if dr else "ground_truth"
    task = cfg.task(mode)
    ss = np.random.SeedSequence([seed, 1 if dr else 0])
    env_seed, net_seed, train_seed = (int(x) for x in ss.generate_state(3))
    env = PushingEnv(task, cfg.sim, cfg.budget.num_envs, seed=env_seed)
    bundle = fresh_task_bundle(cfg, seed=net_seed)
    rows: list[dict] = []
    updates = cfg.budget.dr_updates if dr else cfg.budget.phase1_updates
    trainer = train_policy(env, bundle, cfg.ppo, updates, cfg.budget.rollout_steps, train_seed, rows,
                           return_scale=cfg.budget.return_scale, ang_anneal_frac=cfg.budget.ang_anneal_frac)
    name = "dr" if dr else "phase1"
    path = dirs["checkpoints"] / f"{name}.json"
    save_policy(path, bundle, trainer, h, {"phase": name, "seed": seed})
    write_curve_csv(dirs["metrics"] / f"train_{name}_curve.csv", rows, h)
    return path


def run_finetune(cfg: RunConfig, out_dir, seed: int) -> Path:
    """Continue training with per-episode noisy conditioning."""
    dirs = _run_dirs(out_dir)
    h = write_config(cfg, dirs["run"])
    src = dirs["checkpoints"] / "phase1.json"
    if not src.exists():
        raise MissingArtifact(f"finetune needs {src}")
    bundle, _, _ = load_policy(src, cfg)
    task = cfg.task("noisy_ground_truth")
    ss = np.random.SeedSequence([seed, 15])
    env_seed, train_seed = (int(x) for x in ss.generate_state(2))
    env = PushingEnv(task, cfg.sim, cfg.budget.num_envs, seed=env_seed)
    rows: list[dict] = []
    trainer = train_policy(env, bundle, cfg.ppo, cfg.budget.phase15_updates, cfg.budget.rollout_steps, train_seed, rows,
                           return_scale=cfg.budget.return_scale)
    path = dirs["checkpoints"] / "phase15.json"
    save_policy(path, bundle, trainer, h, {"phase": "phase15", "seed": seed, "noise_sigma": cfg.phase15_sigma})
    write_curve_csv(dirs["metrics"] / "train_phase15_curve.csv", rows, h)
    return path


def ensemble_to_tensors(ens: AdaptationEnsemble) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for m_idx, member in enumerate(ens.members):
        for i, (w, b) in enumerate(zip(member.backbone.weights, member.backbone.biases)):
            out[f"member{m_idx}.w{i}"] = w
            out[f"member{m_idx}.b{i}"] = b
    return out


def ensemble_from_checkpoint(path, cfg: RunConfig) -> AdaptationEnsemble:
    tensors, header = load_checkpoint(path)
    meta = header["metadata"]
    ens = AdaptationEnsemble(int(meta["n_members"]), int(meta["input_dim"]), list(cfg.budget.ensemble_hidden), seed=0)
    for m_idx, member in enumerate(ens.members):
        for i in range(len(member.backbone.weights)):
            member.backbone.weights[i][...] = tensors[f"member{m_idx}.w{i}"]
            member.backbone.biases[i][...] = tensors[f"member{m_idx}.b{i}"]
    return ens


def run_train_phase2(cfg: RunConfig, out_dir, seed: int) -> Path:
    """Collect teacher-conditioned rollouts with the frozen policy, fit the ensemble."""
    dirs = _run_dirs(out_dir)
    h = write_config(cfg, dirs["run"])
    src = dirs["checkpoints"] / "phase15.json"
    if not src.exists():
        raise MissingArtifact(f"phase 2 needs {src}")
    bundle, _, _ = load_policy(src, cfg)
    task = cfg.task("ground_truth")
    ss = np.random.SeedSequence([seed, 2])
    env_seed, act_seed, ens_seed, train_seed = (int(x) for x in ss.generate_state(4))
    env = PushingEnv(task, cfg.sim, cfg.budget.ensemble_episodes, seed=env_seed, auto_reset=False)
    rng = np.random.Generator(np.random.PCG64(act_seed))

    def policy_fn(obs):
        actions, _, _ = bundle.sample(obs, rng)
        return actions

    records = batch_rollout(env, policy_fn, cfg.episode_horizon)
    dataset = windows_from_records(records, k=cfg.window_k)
    heldout_mask = dataset.episode_id % 8 == 0
    train_idx = np.nonzero(~heldout_mask)[0]
    held_idx = np.nonzero(heldout_mask)[0]
    train_ds = WindowDataset(
        inputs=dataset.inputs[train_idx], labels=dataset.labels[train_idx],
        contact_frac=dataset.contact_frac[train_idx], pre_contact=dataset.pre_contact[train_idx],
        episode_id=dataset.episode_id[train_idx],
    )
    input_dim = dataset.inputs.shape[1]
    ens = AdaptationEnsemble(cfg.ensemble_n, input_dim, list(cfg.budget.ensemble_hidden), seed=ens_seed)
    train_ensemble(ens, train_ds, cfg.budget.ensemble_epochs, train_seed,
                   batch_size=cfg.budget.ensemble_batch, lr=cfg.budget.ensemble_lr)

    theta, var_epi, var_alea, var_total = ens.predict(dataset.inputs[held_idx])
    labels = dataset.labels[held_idx]
    err = theta - labels
    contact = dataset.contact_frac[held_idx] >= 0.5
    pre = dataset.pre_contact[held_idx]
    z = np.abs(err) / np.sqrt(var_total)
    report = {
        "config_hash": h,
        "seed": seed,
        "episodes": len(records),
        "windows_train": int(train_idx.shape[0]),
        "windows_heldout": int(held_idx.shape[0]),
        "rmse_heldout_m": float(np.sqrt(np.mean(err**2))),
        "rmse_contact_m": float(np.sqrt(np.mean(err[contact] ** 2))) if np.any(contact) else None,
        "mean_var_total_contact": float(np.mean(var_total[contact])) if np.any(contact) else None,
        "mean_var_total_precontact": float(np.mean(var_total[pre])) if np.any(pre) else None,
        "coverage": {
            "within_1sigma_pct": float(np.mean(z <= 1.0) * 100.0),
            "within_1_2sigma_pct": float(np.mean((z > 1.0) & (z <= 2.0)) * 100.0),
            "beyond_2sigma_pct": float(np.mean(z > 2.0) * 100.0),
        },
    }
    path = dirs["checkpoints"] / "ensemble.json"
    save_checkpoint(path, ensemble_to_tensors(ens), h,
                    {"n_members": ens.n_members, "input_dim": input_dim, "phase": "phase2", "seed": seed})
    with open(dirs["metrics"] / "phase2_report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class BatchedEstimator:
    """Per-env online estimators advanced together; matches OnlineEstimator stepwise."""

    def __init__(self, ens: AdaptationEnsemble, prior: ParamEstimate | None, com_range, num: int, k: int):
        self.ens = ens
        self.prior = prior
        self.com_range = com_range
        self.windows = [HistoryWindow(k=k) for _ in range(num)]
        self.num = num
        self.steps = 0
        self.clamp_count = 0

    def __call__(self, feats: np.ndarray, prev_actions: np.ndarray):
        for i, w in enumerate(self.windows):
            w.push(feats[i], prev_actions[i])
        first = self.steps == 0
        self.steps += 1
        nan = np.full(self.num, np.nan)
        trace = {k: nan.copy() for k in
                 ("theta_prior", "sigma_prior", "theta_rma", "sigma_epi", "sigma_alea", "theta_fused", "sigma_fused")}
        if self.prior is not None:
            trace["theta_prior"][:] = self.prior.value
            trace["sigma_prior"][:] = math.sqrt(self.prior.variance)
        if first and self.prior is not None:
            fused_v = np.full(self.num, self.prior.value)
            fused_var = np.full(self.num, self.prior.variance)
        else:
            inputs = np.stack([w.as_input() for w in self.windows], axis=0)
            theta, var_epi, var_alea, var_total = self.ens.predict(inputs)
            trace["theta_rma"] = theta
            trace["sigma_epi"] = np.sqrt(var_epi)
            trace["sigma_alea"] = np.sqrt(var_alea)
            if self.prior is not None:
                wp = 1.0 / self.prior.variance
                wo = 1.0 / var_total
                fused_v = (self.prior.value * wp + theta * wo) / (wp + wo)
                fused_var = 1.0 / (wp + wo)
            else:
                fused_v = theta
                fused_var = var_total
        lo, hi = self.com_range
        clamped = np.clip(fused_v, lo, hi)
        self.clamp_count += int(np.sum(clamped != fused_v))
        trace["theta_fused"] = clamped
        trace["sigma_fused"] = np.sqrt(fused_var)
        return clamped, trace


def eval_init_poses(cfg: RunConfig, seed: int, trials: int) -> np.ndarray:
    """Orientation grid with seeded jitter; identical across methods for one seed."""
    grid_n = max(1, int(round(360.0 / cfg.orientation_grid_deg)))
    poses = np.zeros((trials, 3))
    for i in range(trials):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        base = math.radians(cfg.orientation_grid_deg) * (i % grid_n)
        jx, jy = rng.uniform(-cfg.eval_jitter_pos, cfg.eval_jitter_pos, size=2)
        jth = math.radians(rng.uniform(-cfg.eval_jitter_deg, cfg.eval_jitter_deg))
        poses[i] = (jx, jy, base + jth)
    return poses


def evaluate_method(cfg: RunConfig, run_dir, method: str, seed: int,
                    prior_override: ParamEstimate | None = None,
                    trials: int | None = None) -> tuple[dict, list[EpisodeRecord]]:
    """Run the evaluation protocol for one method and seed; returns (summary, records)."""
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}")
    dirs = _run_dirs(run_dir)
    h = config_hash(cfg)
    trials = cfg.trials if trials is None else trials
    ck = dirs["checkpoints"]
    policy_path = ck / ("dr.json" if method == "dr" else "phase15.json")
    if not policy_path.exists():
        raise MissingArtifact(f"{method} evaluation needs {policy_path}")
    bundle, _, _ = load_policy(policy_path, cfg)

    prior = prior_override if prior_override is not None else cfg.prior()
    lo, hi = cfg.com_range
    estimator = None
    if method == "privileged":
        task = cfg.task("ground_truth")
    elif method == "prior_only":
        task = cfg.task("fixed_value", fixed_value=float(np.clip(prior.value, lo, hi)))
    elif method == "dr":
        task = cfg.task("none")
    else:
        task = cfg.task("external_estimate")
        ens_path = ck / "ensemble.json"
        if not ens_path.exists():
            raise MissingArtifact(f"{method} evaluation needs {ens_path}")
        ens = ensemble_from_checkpoint(ens_path, cfg)
        estimator = BatchedEstimator(ens, prior if method == "fused" else None, (lo, hi), trials, cfg.window_k)

    poses = eval_init_poses(cfg, seed, trials)
    env = PushingEnv(task, cfg.sim, trials, seed=seed, auto_reset=False,
                     fixed_com=cfg.eval_com, init_poses=poses)
    records = batch_rollout(env, bundle.act_mean, cfg.episode_horizon, estimator_hook=estimator)
    summary = summarize_records(records, method=method, seed=seed, cfg_hash=h,
                                control_period=cfg.sim.control_period)
    if estimator is not None:
        summary["clamp_events"] = estimator.clamp_count
    return summary, records


def summarize_records(records: list[EpisodeRecord], method: str, seed: int, cfg_hash: str,
                      control_period: float | None = None) -> dict:
    n = len(records)
    succ = np.array([r.success for r in records], dtype=bool)
    pos = np.array([r.final_pos_err for r in records])
    ang = np.array([r.final_ang_err for r in records])
    times = np.array([r.completion_time if r.completion_time is not None else np.nan for r in records])
    ok = ~np.isnan(times)
    incl = None
    if control_period is not None and n:
        # failed episodes run out the horizon; charge their full runtime
        full = np.where(ok, times, np.array([r.length for r in records]) * control_period)
        incl = float(np.mean(full))
    per_trial = [
        {
            "success": bool(r.success),
            "final_pos_err_m": float(r.final_pos_err),
            "final_ang_err_rad": float(r.final_ang_err),
            "completion_time_s": r.completion_time,
            "true_com_m": r.true_com,
            "length": r.length,
        }
        for r in records
    ]
    return {
        "config_hash": cfg_hash,
        "method": method,
        "seed": seed,
        "trials": n,
        "successes": int(np.sum(succ)),
        "success_rate_pct": float(100.0 * np.sum(succ) / n) if n else 0.0,
        "pos_err_mean_m": float(np.mean(pos)) if n else None,
        "pos_err_std_m": float(np.std(pos)) if n else None,
        "ang_err_mean_rad": float(np.mean(ang)) if n else None,
        "ang_err_std_rad": float(np.std(ang)) if n else None,
        "time_mean_s": float(np.mean(times[ok])) if np.any(ok) else None,
        "time_std_s": float(np.std(times[ok])) if np.any(ok) else None,
        "time_mean_incl_failures_s": incl,
        "per_trial": per_trial,
    }


def write_metrics_json(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def cdf_rows(errors: np.ndarray) -> list[tuple[float, float]]:
    err = np.sort(np.asarray(errors, dtype=np.float64))
    n = err.shape[0]
    return [(float(err[i]), 100.0 * (i + 1) / n) for i in range(n)]


def write_cdf_csv(path, errors: np.ndarray, cfg_hash: str) -> None:
    with open(path, "w") as f:
        f.write(f"# config_hash={cfg_hash}\n")
        f.write("err_m,percentile\n")
        for e, p in cdf_rows(errors):
            f.write(f"{e:.9g},{p:.9g}\n")


def write_traces_jsonl(path, records: list[EpisodeRecord], cfg_hash: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"config_hash": cfg_hash}) + "\n")
        for i, rec in enumerate(records):
            f.write(json.dumps({"episode": i}) + "\n")
            for line in rec.jsonl_lines():
                f.write(line + "\n")


def run_evaluate(cfg: RunConfig, out_dir, seed: int | None = None) -> list[Path]:
    """Evaluate cfg.method for the configured seeds (or one given seed)."""
    dirs = _run_dirs(out_dir)
    h = write_config(cfg, dirs["run"])
    seeds = [seed] if seed is not None else list(cfg.seeds)
    out_paths = []
    for s in seeds:
        summary, records = evaluate_method(cfg, out_dir, cfg.method, s)
        mpath = dirs["metrics"] / f"evaluate_{cfg.method}_seed{s}.json"
        write_metrics_json(mpath, summary)
        errors = np.array([r.final_pos_err for r in records])
        write_cdf_csv(dirs["metrics"] / f"cdf_{cfg.method}_seed{s}.csv", errors, h)
        write_traces_jsonl(dirs["traces"] / f"evaluate_{cfg.method}_seed{s}.jsonl", records, h)
        out_paths.append(mpath)
    return out_paths


def run_ablation(cfg: RunConfig, out_dir, seed: int) -> Path:
    """Prior-quality ladder: fused vs direct conditioning on the biased prior value."""
    dirs = _run_dirs(out_dir)
    h = write_config(cfg, dirs["run"])
    rows = []
    for value, sigma in cfg.ablation_rungs:
        prior = ParamEstimate(value=value, variance=sigma * sigma, source="prior")
        fused_summary, _ = evaluate_method(cfg, out_dir, "fused", seed, prior_override=prior, trials=cfg.ablation_trials)
        cond_summary, _ = evaluate_method(cfg, out_dir, "prior_only", seed, prior_override=prior, trials=cfg.ablation_trials)
        rows.append(
            {
                "prior_value_m": value,
                "prior_sigma_m": sigma,
                "fused_success_rate_pct": fused_summary["success_rate_pct"],
                "phase15_only_success_rate_pct": cond_summary["success_rate_pct"],
                "fused": {k: fused_summary[k] for k in ("successes", "trials", "pos_err_mean_m")},
                "phase15_only": {k: cond_summary[k] for k in ("successes", "trials", "pos_err_mean_m")},
            }
        )
    report = {"config_hash": h, "seed": seed, "trials_per_rung": cfg.ablation_trials, "rungs": rows}
    path = dirs["metrics"] / "ablation.json"
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def export_cdf(metrics_path, out_path) -> Path:
    """Rebuild the error CDF from a metrics JSON's per-trial records."""
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        raise MissingArtifact(f"metrics file not found: {metrics_path}")
    with open(metrics_path) as f:
        doc = json.load(f)
    try:
        errors = np.array([t["final_pos_err_m"] for t in doc["per_trial"]], dtype=np.float64)
        h = doc["config_hash"]
    except (KeyError, TypeError) as exc:
        raise InvalidConfig(f"metrics file lacks per-trial errors: {exc}") from exc
    if errors.size == 0:
        raise InvalidConfig("metrics file holds no trials")
    write_cdf_csv(out_path, errors, h)
    return Path(out_path)
