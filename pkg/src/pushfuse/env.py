"""Episodic pushing tasks with a randomized centre of mass.

Observations and pusher commands both live in the goal frame, so every episode
reduces to the same canonical task regardless of the initial world orientation.
The actor sees object pose, pusher position, one conditioned physical-parameter
channel, and its previous action; the critic additionally sees the object twist
and the true parameter. Episodes end on a success latch (position and
orientation inside tolerance, held for a configured duration) or at the horizon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EpisodeFinished, InvalidConfig, InvalidReset, OutOfRangeParam, ShapeError
from .geometry import RigidObjectSpec, realize_com
from .sim import BodyModel, SimParams, SimulatorBatch, clamp_norm, place_pusher, wrap_angle

CONDITIONING_MODES = ("ground_truth", "fixed_value", "noisy_ground_truth", "external_estimate", "none")

ACTOR_OBS_DIM = 9
CRITIC_OBS_DIM = 13


@dataclass(frozen=True)
class TaskConfig:
    """Episode definition: object, parameter range, goal, tolerances, reward."""

    object_spec: RigidObjectSpec
    com_range: tuple[float, float]
    goal_pose: tuple[float, float, float] = (0.40, 0.0, 0.0)
    episode_horizon: int = 400
    success_pos_tol: float = 0.03
    success_ang_tol: float = math.radians(20.0)
    success_hold_s: float = 0.0
    conditioning_mode: str = "ground_truth"
    noise_sigma: float = 0.015
    fixed_conditioning_value: float | None = None
    w_pos: float = 1.0
    w_ang: float = 0.3
    w_act: float = 0.01
    success_bonus: float = 10.0
    pusher_standoff: float = 0.002
    workspace_halfextent: float = 1.5
    init_pos_jitter: float = 0.02
    init_theta_range: float = math.pi

    def __post_init__(self):
        lo, hi = self.com_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise InvalidConfig("com_range must be a finite (lo, hi) with lo < hi")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise InvalidConfig(f"unknown conditioning_mode {self.conditioning_mode!r}")
        if self.episode_horizon < 1:
            raise InvalidConfig("episode_horizon must be >= 1")
        for name in ("success_pos_tol", "success_ang_tol", "noise_sigma", "pusher_standoff", "workspace_halfextent"):
            if getattr(self, name) <= 0.0:
                raise InvalidConfig(f"{name} must be positive")
        if self.success_hold_s < 0.0 or self.init_pos_jitter < 0.0:
            raise InvalidConfig("success_hold_s and init_pos_jitter must be >= 0")
        if not (0.0 <= self.init_theta_range <= math.pi):
            raise InvalidConfig("init_theta_range must lie in [0, pi]")


def sample_episode_params(config: TaskConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Draw the true parameter and the value the policy will be conditioned on."""
    lo, hi = config.com_range
    com = float(rng.uniform(lo, hi))
    mode = config.conditioning_mode
    if mode == "ground_truth":
        return com, com
    if mode == "noisy_ground_truth":
        noisy = com + config.noise_sigma * float(rng.standard_normal())
        return com, float(np.clip(noisy, lo, hi))
    if mode == "fixed_value":
        v = config.fixed_conditioning_value
        if v is None or not (lo <= v <= hi):
            raise OutOfRangeParam(f"fixed conditioning value {v!r} outside [{lo}, {hi}]")
        return com, float(v)
    # none and external_estimate: channel starts at zero (external is set per step)
    return com, 0.0


@dataclass
class StepBatch:
    """Vectorized step result; obs fields are post-reset when auto-reset is on."""

    actor_obs: np.ndarray
    critic_obs: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    pre_reset_critic_obs: np.ndarray
    pos_err: np.ndarray
    ang_err: np.ndarray
    contact: np.ndarray
    latched_now: np.ndarray
    out_of_bounds: np.ndarray

    @property
    def done(self) -> np.ndarray:
        return self.terminal | self.truncated


class PushingEnv:
    """N independent episodes advanced in lockstep over a shared task definition."""

    def __init__(
        self,
        task: TaskConfig,
        sim_params: SimParams,
        num_envs: int,
        seed: int | None = 0,
        seeds: list[int] | None = None,
        auto_reset: bool = True,
        fixed_com: float | None = None,
        init_poses: np.ndarray | None = None,
    ):
        self.task = task
        self.params = sim_params
        self.num = int(num_envs)
        self.auto_reset = auto_reset
        self.fixed_com = fixed_com
        if init_poses is not None:
            init_poses = np.asarray(init_poses, dtype=np.float64)
            if init_poses.shape != (self.num, 3):
                raise ShapeError(f"init_poses must be ({self.num}, 3)")
        self.init_poses = init_poses
        if seeds is None:
            seqs = np.random.SeedSequence(seed).spawn(self.num)
            self.rngs = [np.random.Generator(np.random.PCG64(s)) for s in seqs]
        else:
            if len(seeds) != self.num:
                raise ShapeError("need one seed per env")
            self.rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]

        spec = task.object_spec
        if task.pusher_standoff <= 0.0:
            raise InvalidReset(f"pusher standoff gap {task.pusher_standoff} m must be positive")
        self.sim = SimulatorBatch(tuple(p.vertices for p in spec.parts), sim_params, self.num)
        lo, hi = task.com_range
        if fixed_com is not None and not (lo <= fixed_com <= hi):
            raise OutOfRangeParam(f"fixed true parameter {fixed_com} outside [{lo}, {hi}]")

        self.hold_steps = max(1, int(round(task.success_hold_s / sim_params.control_period)))
        # goal_pose is a displacement in the object's initial frame: an offset along
        # the object's own axes plus an orientation change ("move 40 cm along the
        # object's +x, keep orientation"), applied to each episode's initial pose
        g = np.asarray(task.goal_pose, dtype=np.float64)
        self._goal_offset = g[:2]
        self._goal_dtheta = float(g[2])
        self._goal_xy = np.zeros((self.num, 2))
        self._goal_theta = np.zeros(self.num)
        self._cosg = np.ones(self.num)
        self._sing = np.zeros(self.num)

        # curriculum multiplier on the orientation penalty; training ramps it
        # 0 -> 1 so early exploration is not punished for incidental rotation
        self.reward_ang_scale = 1.0

        n = self.num
        self.true_com = np.zeros(n)
        self.cond_value = np.zeros(n)
        self.prev_action = np.zeros((n, 2))
        self.step_idx = np.zeros(n, dtype=np.int64)
        self.hold_streak = np.zeros(n, dtype=np.int64)
        self.latched = np.zeros(n, dtype=bool)
        self.done = np.zeros(n, dtype=bool)
        self.success = np.zeros(n, dtype=bool)
        self.latch_step = np.full(n, -1, dtype=np.int64)
        self.final_pos_err = np.zeros(n)
        self.final_ang_err = np.zeros(n)
        self.episode_len = np.zeros(n, dtype=np.int64)
        self._reset_rows(np.arange(n))

    @property
    def control_period(self) -> float:
        return self.params.control_period

    def _reset_rows(self, rows: np.ndarray) -> None:
        task = self.task
        rows = np.atleast_1d(rows)
        poses = np.zeros((rows.shape[0], 3))
        for j, i in enumerate(rows):
            rng = self.rngs[i]
            if self.init_poses is not None:
                pose = self.init_poses[i].copy()
            else:
                xy = rng.uniform(-task.init_pos_jitter, task.init_pos_jitter, size=2)
                theta = rng.uniform(-task.init_theta_range, task.init_theta_range)
                pose = np.array([xy[0], xy[1], theta])
            if self.fixed_com is not None:
                com = float(self.fixed_com)
                mode = task.conditioning_mode
                if mode == "ground_truth":
                    cond = com
                elif mode == "noisy_ground_truth":
                    lo, hi = task.com_range
                    cond = float(np.clip(com + task.noise_sigma * rng.standard_normal(), lo, hi))
                elif mode == "fixed_value":
                    lo, hi = task.com_range
                    v = task.fixed_conditioning_value
                    if v is None or not (lo <= v <= hi):
                        raise OutOfRangeParam(f"fixed conditioning value {v!r} outside [{lo}, {hi}]")
                    cond = float(v)
                else:
                    cond = 0.0
            else:
                com, cond = sample_episode_params(task, rng)
            _, props = realize_com(task.object_spec, com)
            body = BodyModel(parts=self.sim.parts_body, props=props)
            self.sim.set_body_rows(np.array([i]), body)
            poses[j] = pose
            self.true_com[i] = com
            self.cond_value[i] = cond
            c0, s0 = math.cos(pose[2]), math.sin(pose[2])
            self._goal_xy[i, 0] = pose[0] + c0 * self._goal_offset[0] - s0 * self._goal_offset[1]
            self._goal_xy[i, 1] = pose[1] + s0 * self._goal_offset[0] + c0 * self._goal_offset[1]
            self._goal_theta[i] = wrap_angle(pose[2] + self._goal_dtheta)
            self._cosg[i] = math.cos(-self._goal_theta[i])
            self._sing[i] = math.sin(-self._goal_theta[i])

        to_goal = self._goal_xy[rows] - poses[:, :2]
        dist = np.sqrt(np.sum(to_goal**2, axis=1))
        directions = np.where(dist[:, None] > 1e-9, to_goal / np.maximum(dist[:, None], 1e-12),
                              np.array([1.0, 0.0]))
        pushers = place_pusher(poses[:, :2], poses[:, 2], directions,
                               self.sim.parts_body, self.params.pusher_radius, task.pusher_standoff)
        self.sim.set_state_rows(rows, poses, pushers)

        for i in rows:
            self.prev_action[i] = 0.0
            self.step_idx[i] = 0
            self.done[i] = False
            self.success[i] = False
            self.latch_step[i] = -1
            self.episode_len[i] = 0
            pos_err, ang_err = self._errors_row(i)
            in_tol = (pos_err < task.success_pos_tol) and (ang_err < task.success_ang_tol)
            self.hold_streak[i] = 1 if in_tol else 0
            self.latched[i] = in_tol and self.hold_streak[i] >= self.hold_steps
            if self.latched[i]:
                self.done[i] = True
                self.success[i] = True
                self.latch_step[i] = 0
                self.final_pos_err[i] = pos_err
                self.final_ang_err[i] = ang_err

    def _errors_row(self, i: int) -> tuple[float, float]:
        dp = self.sim.origin[i] - self._goal_xy[i]
        pos_err = float(np.sqrt(np.sum(dp * dp)))
        ang_err = float(abs(wrap_angle(self.sim.theta[i] - self._goal_theta[i])))
        return pos_err, ang_err

    def errors(self) -> tuple[np.ndarray, np.ndarray]:
        dp = self.sim.origin - self._goal_xy
        pos_err = np.sqrt(np.sum(dp * dp, axis=1))
        ang_err = np.abs(wrap_angle(self.sim.theta - self._goal_theta))
        return pos_err, np.asarray(ang_err)

    def _rot_goal(self, vecs: np.ndarray) -> np.ndarray:
        x = self._cosg * vecs[:, 0] - self._sing * vecs[:, 1]
        y = self._sing * vecs[:, 0] + self._cosg * vecs[:, 1]
        return np.stack([x, y], axis=1)

    def history_features(self) -> np.ndarray:
        """Goal-frame pose and pusher channels, the actor-observable state."""
        rel_p = self._rot_goal(self.sim.origin - self._goal_xy)
        dth = wrap_angle(self.sim.theta - self._goal_theta)
        rel_push = self._rot_goal(self.sim.pusher - self._goal_xy)
        return np.concatenate(
            [rel_p, np.sin(dth)[:, None], np.cos(dth)[:, None], rel_push], axis=1
        )

    def set_conditioning(self, values: np.ndarray) -> None:
        """Install per-env conditioned values (external_estimate mode)."""
        if self.task.conditioning_mode != "external_estimate":
            raise InvalidConfig("set_conditioning requires conditioning_mode='external_estimate'")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num,):
            raise ShapeError(f"need ({self.num},) conditioning values")
        lo, hi = self.task.com_range
        if np.any(values < lo - 1e-9) or np.any(values > hi + 1e-9):
            raise OutOfRangeParam("external estimates must be clamped to the parameter range")
        self.cond_value = values.copy()

    def observe(self, conditioned: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return (actor_obs (N, 9), critic_obs (N, 13)) for the current state."""
        feats = self.history_features()
        cond = self.cond_value if conditioned is None else np.asarray(conditioned, dtype=np.float64)
        actor = np.concatenate([feats, cond[:, None], self.prev_action], axis=1)
        vel_g = self._rot_goal(self.sim.vel)
        critic = np.concatenate(
            [actor, vel_g, self.sim.omega[:, None], self.true_com[:, None]], axis=1
        )
        return actor, critic

    def step(self, actions: np.ndarray) -> StepBatch:
        """Apply goal-frame commands (unit ball = d_max displacement) to active envs."""
        task = self.task
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num, 2):
            raise ShapeError(f"actions must be ({self.num}, 2)")
        if not self.auto_reset and bool(np.all(self.done)):
            raise EpisodeFinished("all episodes have ended; reset before stepping")
        active = ~self.done
        acts = clamp_norm(actions, 1.0)
        # commands live in the goal frame, like the observations; rotate to world
        # (cosg/sing hold cos/sin of -goal_theta)
        wx = self._cosg * acts[:, 0] + self._sing * acts[:, 1]
        wy = -self._sing * acts[:, 0] + self._cosg * acts[:, 1]
        deltas = np.stack([wx, wy], axis=1) * self.params.d_max
        deltas[~active] = 0.0
        info = self.sim.control_step(deltas)

        pos_err, ang_err = self.errors()
        in_tol = (pos_err < task.success_pos_tol) & (ang_err < task.success_ang_tol)
        self.hold_streak = np.where(in_tol, self.hold_streak + 1, 0)
        latched_now = active & ~self.latched & (self.hold_streak >= self.hold_steps)
        self.latched |= latched_now

        act_cost = np.sum(acts * acts, axis=1)
        w_ang = task.w_ang * self.reward_ang_scale
        reward = -task.w_pos * pos_err - w_ang * ang_err - task.w_act * act_cost
        reward = reward + task.success_bonus * latched_now
        reward[~active] = 0.0

        self.step_idx[active] += 1
        oob = pos_err > task.workspace_halfextent
        terminal = latched_now
        truncated = active & ~terminal & ((self.step_idx >= task.episode_horizon) | oob)
        ended = terminal | truncated
        if np.any(ended):
            idx = np.nonzero(ended)[0]
            self.final_pos_err[idx] = pos_err[idx]
            self.final_ang_err[idx] = ang_err[idx]
            self.episode_len[idx] = self.step_idx[idx]
            self.success[idx] = terminal[idx]
            self.latch_step[idx] = np.where(terminal[idx], self.step_idx[idx], -1)
            self.done[idx] = True

        self.prev_action[active] = acts[active]
        _, pre_reset_critic = self.observe()

        if self.auto_reset and np.any(self.done):
            guard = 0
            while np.any(self.done):
                self._reset_rows(np.nonzero(self.done)[0])
                guard += 1
                if guard > 100:
                    raise InvalidReset("reset keeps landing inside the success region")

        actor_obs, critic_obs = self.observe()
        return StepBatch(
            actor_obs=actor_obs,
            critic_obs=critic_obs,
            reward=reward,
            terminal=terminal,
            truncated=truncated,
            pre_reset_critic_obs=pre_reset_critic,
            pos_err=pos_err,
            ang_err=ang_err,
            contact=info["contact"].copy(),
            latched_now=latched_now,
            out_of_bounds=oob,
        )

    def completion_times(self) -> np.ndarray:
        """Per-env completion time in seconds (NaN where the episode failed)."""
        t = self.latch_step.astype(np.float64) * self.control_period
        return np.where(self.latch_step >= 0, t, np.nan)


@dataclass
class EpisodeRecord:
    """Per-step trace of one episode plus its final metrics."""

    true_com: float
    success: bool
    completion_time: float | None
    final_pos_err: float
    final_ang_err: float
    length: int
    feats: np.ndarray          # (T, 6) goal-frame pose/pusher features at decision time
    actions: np.ndarray        # (T, 2) normalized actions taken
    rewards: np.ndarray
    pos_err: np.ndarray
    ang_err: np.ndarray
    contact: np.ndarray        # (T,) bool, contact during the step that followed
    conditioned: np.ndarray    # (T,) value the policy saw
    estimates: dict[str, np.ndarray] = field(default_factory=dict)

    def jsonl_lines(self) -> list[str]:
        lines = []
        for t in range(self.length):
            row = {
                "t": t,
                "obs": [round(float(v), 9) for v in self.feats[t]],
                "action": [round(float(v), 9) for v in self.actions[t]],
                "reward": round(float(self.rewards[t]), 9),
                "pos_err": round(float(self.pos_err[t]), 9),
                "ang_err": round(float(self.ang_err[t]), 9),
                "contact": bool(self.contact[t]),
                "conditioned": round(float(self.conditioned[t]), 9),
            }
            for k, v in self.estimates.items():
                val = float(v[t])
                row[k] = None if math.isnan(val) else round(val, 9)
            lines.append(json.dumps(row, sort_keys=True))
        final = {
            "final": True,
            "true_com": round(self.true_com, 9),
            "success": bool(self.success),
            "completion_time": self.completion_time,
            "final_pos_err": round(self.final_pos_err, 9),
            "final_ang_err": round(self.final_ang_err, 9),
            "length": self.length,
        }
        lines.append(json.dumps(final, sort_keys=True))
        return lines


ESTIMATE_KEYS = ("theta_prior", "sigma_prior", "theta_rma", "sigma_epi", "sigma_alea", "theta_fused", "sigma_fused")


def batch_rollout(env: PushingEnv, policy_fn, steps: int, estimator_hook=None) -> list[EpisodeRecord]:
    """Advance a vectorized env for `steps` control steps, returning finished episodes.

    policy_fn maps actor observations (N, 9) to normalized actions (N, 2).
    estimator_hook, if given, is called before each decision with
    (features (N, 6), prev_action (N, 2)) and must return (conditioned (N,),
    trace dict of (N,) arrays) which are installed via set_conditioning.
    """
    n = env.num
    buf: list[dict[str, list]] = [
        {"feats": [], "actions": [], "rewards": [], "pos_err": [], "ang_err": [], "contact": [], "conditioned": [], "est": []}
        for _ in range(n)
    ]
    records: list[EpisodeRecord] = []

    def finalize(i: int, true_com: float, success: bool, pos_err: float, ang_err: float) -> None:
        b = buf[i]
        if not b["feats"]:
            return
        est: dict[str, np.ndarray] = {}
        if b["est"] and b["est"][0] is not None:
            for k in b["est"][0]:
                est[k] = np.array([step[k] for step in b["est"]])
        length = len(b["feats"])
        records.append(
            EpisodeRecord(
                true_com=true_com,
                success=success,
                completion_time=length * env.control_period if success else None,
                final_pos_err=pos_err,
                final_ang_err=ang_err,
                length=length,
                feats=np.array(b["feats"]),
                actions=np.array(b["actions"]),
                rewards=np.array(b["rewards"]),
                pos_err=np.array(b["pos_err"]),
                ang_err=np.array(b["ang_err"]),
                contact=np.array(b["contact"], dtype=bool),
                conditioned=np.array(b["conditioned"]),
                estimates=est,
            )
        )
        for v in b.values():
            v.clear()

    # an episode latched at reset (init inside tolerance) is complete with no steps
    if not env.auto_reset:
        for i in range(n):
            if env.done[i]:
                records.append(
                    EpisodeRecord(
                        true_com=float(env.true_com[i]), success=bool(env.success[i]),
                        completion_time=0.0 if env.success[i] else None,
                        final_pos_err=float(env.final_pos_err[i]), final_ang_err=float(env.final_ang_err[i]),
                        length=0, feats=np.zeros((0, 6)), actions=np.zeros((0, 2)),
                        rewards=np.zeros(0), pos_err=np.zeros(0), ang_err=np.zeros(0),
                        contact=np.zeros(0, dtype=bool), conditioned=np.zeros(0),
                    )
                )

    for _ in range(steps):
        if not env.auto_reset and bool(np.all(env.done)):
            break
        active_before = ~env.done
        coms_before = env.true_com.copy()
        trace = None
        if estimator_hook is not None:
            cond, trace = estimator_hook(env.history_features(), env.prev_action.copy())
            env.set_conditioning(cond)
        actor_obs, _ = env.observe()
        feats = actor_obs[:, :6]
        cond_seen = actor_obs[:, 6]
        actions = policy_fn(actor_obs)
        sb = env.step(actions)
        for i in range(n):
            if not active_before[i]:
                continue
            b = buf[i]
            b["feats"].append(feats[i])
            b["actions"].append(np.asarray(actions[i], dtype=np.float64))
            b["rewards"].append(float(sb.reward[i]))
            b["pos_err"].append(float(sb.pos_err[i]))
            b["ang_err"].append(float(sb.ang_err[i]))
            b["contact"].append(bool(sb.contact[i]))
            b["conditioned"].append(float(cond_seen[i]))
            b["est"].append(None if trace is None else {k: float(trace[k][i]) for k in trace})
            if sb.done[i]:
                finalize(i, float(coms_before[i]), bool(sb.terminal[i]), float(sb.pos_err[i]), float(sb.ang_err[i]))
    return records
