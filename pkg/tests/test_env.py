import json
import math

import numpy as np
import pytest

from pushfuse.env import (
    ACTOR_OBS_DIM,
    CRITIC_OBS_DIM,
    EpisodeRecord,
    PushingEnv,
    TaskConfig,
    batch_rollout,
    sample_episode_params,
)
from pushfuse.errors import (
    EpisodeFinished,
    InvalidConfig,
    InvalidReset,
    OutOfRangeParam,
    ShapeError,
)
from pushfuse.geometry import tblock_with_weight
from pushfuse.sim import SimParams, wrap_angle


def make_task(**kw) -> TaskConfig:
    base = dict(object_spec=tblock_with_weight(), com_range=(-0.035, 0.075))
    base.update(kw)
    return TaskConfig(**base)


def test_task_config_validation():
    with pytest.raises(InvalidConfig):
        make_task(com_range=(0.1, 0.1))
    with pytest.raises(InvalidConfig):
        make_task(conditioning_mode="telepathy")
    with pytest.raises(InvalidConfig):
        make_task(episode_horizon=0)
    with pytest.raises(InvalidConfig):
        make_task(success_pos_tol=0.0)
    with pytest.raises(InvalidConfig):
        make_task(init_theta_range=4.0)
    with pytest.raises(InvalidConfig):
        make_task(success_hold_s=-1.0)


def test_sample_params_modes():
    rng = np.random.default_rng(0)
    gt = make_task(conditioning_mode="ground_truth")
    for _ in range(50):
        com, cond = sample_episode_params(gt, rng)
        assert cond == com
        assert -0.035 <= com <= 0.075
    for mode in ("none", "external_estimate"):
        com, cond = sample_episode_params(make_task(conditioning_mode=mode), rng)
        assert cond == 0.0
    fixed = make_task(conditioning_mode="fixed_value", fixed_conditioning_value=0.02)
    _, cond = sample_episode_params(fixed, rng)
    assert cond == 0.02
    bad = make_task(conditioning_mode="fixed_value", fixed_conditioning_value=0.5)
    with pytest.raises(OutOfRangeParam):
        sample_episode_params(bad, rng)


def test_noisy_conditioning_noise_scale():
    task = make_task(conditioning_mode="noisy_ground_truth", com_range=(-1.0, 1.0), noise_sigma=0.015)
    rng = np.random.default_rng(1)
    diffs = []
    for _ in range(4000):
        com, cond = sample_episode_params(task, rng)
        diffs.append(cond - com)
    assert abs(float(np.mean(diffs))) < 2e-3
    assert 0.013 < float(np.std(diffs)) < 0.017


def test_observation_layout_is_canonical_at_reset():
    # the goal displacement is expressed in the object's initial frame, so the
    # initial goal-frame observation is the same for every initial heading
    for theta0 in (0.0, 1.1, -2.5, math.pi / 2):
        task = make_task()
        env = PushingEnv(task, SimParams(), 2, seed=3, fixed_com=0.02,
                         init_poses=np.array([[0.0, 0.0, theta0], [0.3, -0.2, theta0]]))
        actor, critic = env.observe()
        assert actor.shape == (2, ACTOR_OBS_DIM)
        assert critic.shape == (2, CRITIC_OBS_DIM)
        assert actor[:, 0] == pytest.approx([-0.40, -0.40], abs=1e-9)   # object behind goal
        assert actor[:, 1] == pytest.approx([0.0, 0.0], abs=1e-9)
        assert actor[:, 2] == pytest.approx([0.0, 0.0], abs=1e-9)       # sin(dtheta)
        assert actor[:, 3] == pytest.approx([1.0, 1.0], abs=1e-9)       # cos(dtheta)
        assert actor[:, 6] == pytest.approx([0.02, 0.02], abs=1e-12)    # conditioned channel
        assert actor[:, 7:9] == pytest.approx(np.zeros((2, 2)))         # previous action
        assert np.array_equal(critic[:, :9], actor)
        assert critic[:, 9:12] == pytest.approx(np.zeros((2, 3)))       # twist at rest
        assert critic[:, 12] == pytest.approx([0.02, 0.02], abs=1e-12)  # true parameter


def test_conditioning_mode_does_not_change_physics_sampling():
    snaps = {}
    for mode in ("ground_truth", "noisy_ground_truth", "none"):
        env = PushingEnv(make_task(conditioning_mode=mode), SimParams(), 4, seed=11)
        snaps[mode] = (env.true_com.copy(), env.sim.origin.copy(), env.sim.theta.copy(),
                       env._goal_xy.copy())
    base = snaps["ground_truth"]
    for mode in ("noisy_ground_truth", "none"):
        for a, b in zip(base, snaps[mode]):
            assert np.array_equal(a, b)
    assert not np.array_equal(
        PushingEnv(make_task(conditioning_mode="noisy_ground_truth"), SimParams(), 4, seed=11).cond_value,
        base[0],
    )


def test_out_of_range_guards():
    task = make_task()
    with pytest.raises(OutOfRangeParam):
        PushingEnv(task, SimParams(), 1, seed=0, fixed_com=0.2)
    env = PushingEnv(make_task(conditioning_mode="external_estimate"), SimParams(), 2, seed=0)
    with pytest.raises(OutOfRangeParam):
        env.set_conditioning(np.array([0.0, 0.5]))
    with pytest.raises(ShapeError):
        env.set_conditioning(np.zeros(3))
    with pytest.raises(InvalidConfig):
        PushingEnv(task, SimParams(), 1, seed=0).set_conditioning(np.zeros(1))
    with pytest.raises(ShapeError):
        PushingEnv(task, SimParams(), 2, seed=0, init_poses=np.zeros((3, 3)))


def test_zero_displacement_goal_latches_at_reset():
    task = make_task(goal_pose=(0.0, 0.0, 0.0))
    env = PushingEnv(task, SimParams(), 3, seed=0, auto_reset=False)
    assert env.done.all() and env.success.all()
    assert np.array_equal(env.latch_step, np.zeros(3, dtype=np.int64))
    assert env.completion_times() == pytest.approx(np.zeros(3))
    with pytest.raises(EpisodeFinished):
        env.step(np.zeros((3, 2)))
    records = batch_rollout(env, lambda obs: np.zeros((3, 2)), 10)
    assert len(records) == 3
    for r in records:
        assert r.success and r.length == 0 and r.completion_time == 0.0


def test_success_hold_requires_consecutive_steps():
    sim = SimParams()
    task = make_task(goal_pose=(0.001, 0.0, 0.0), success_hold_s=3 * sim.control_period)
    env = PushingEnv(task, sim, 1, seed=0, auto_reset=False,
                     init_poses=np.zeros((1, 3)), fixed_com=0.0)
    assert not env.done[0]  # in tolerance but the hold is not satisfied yet
    sb = env.step(np.zeros((1, 2)))
    assert not sb.terminal[0]
    sb = env.step(np.zeros((1, 2)))
    assert sb.terminal[0] and sb.latched_now[0]
    assert env.success[0]
    assert float(sb.reward[0]) == pytest.approx(
        -task.w_pos * sb.pos_err[0] - task.w_ang * sb.ang_err[0] + task.success_bonus, abs=1e-12)
    assert env.completion_times()[0] == pytest.approx(2 * sim.control_period)


def test_horizon_truncation_and_failure_metrics():
    task = make_task(episode_horizon=25)
    env = PushingEnv(task, SimParams(), 2, seed=4, auto_reset=False)
    rng = np.random.default_rng(5)
    last = None
    for _ in range(25):
        last = env.step(rng.uniform(-1.0, 1.0, size=(2, 2)))
    assert last.truncated.all() and not last.terminal.any()
    assert env.done.all() and not env.success.any()
    assert np.array_equal(env.episode_len, np.full(2, 25))
    assert np.isnan(env.completion_times()).all()


def test_workspace_bound_truncates():
    # the goal sits 0.40 m away, outside a 0.35 m workspace radius, so the very
    # first step trips the out-of-bounds truncation
    task = make_task(workspace_halfextent=0.35)
    env = PushingEnv(task, SimParams(), 1, seed=0, auto_reset=False)
    sb = env.step(np.zeros((1, 2)))
    assert sb.out_of_bounds[0] and sb.truncated[0] and not sb.terminal[0]


def test_reward_formula_and_ang_scale():
    task = make_task()
    env = PushingEnv(task, SimParams(), 1, seed=7, auto_reset=False)
    action = np.array([[0.6, -0.3]])
    sb = env.step(action)
    want = (-task.w_pos * sb.pos_err[0] - task.w_ang * sb.ang_err[0]
            - task.w_act * float(np.sum(action**2)))
    assert float(sb.reward[0]) == pytest.approx(want, abs=1e-12)

    env2 = PushingEnv(task, SimParams(), 1, seed=7, auto_reset=False)
    env2.reward_ang_scale = 0.25
    sb2 = env2.step(action)
    want2 = (-task.w_pos * sb2.pos_err[0] - 0.25 * task.w_ang * sb2.ang_err[0]
             - task.w_act * float(np.sum(action**2)))
    assert float(sb2.reward[0]) == pytest.approx(want2, abs=1e-12)
    assert sb2.pos_err[0] == sb.pos_err[0]  # scale only reweights the reward


def test_oversized_action_equals_normalized_action():
    task = make_task()
    a = np.array([[2.4, -1.8]])
    unit = a / np.linalg.norm(a)
    outs = []
    for act in (a, unit):
        env = PushingEnv(task, SimParams(), 1, seed=9, auto_reset=False)
        sb = env.step(act)
        outs.append((sb.actor_obs.copy(), env.prev_action.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])
    assert outs[0][1][0] == pytest.approx(unit[0], abs=1e-12)


def test_world_rotation_is_invisible_in_goal_frame():
    # the same goal-frame action script produces the same goal-frame
    # observations whatever the initial world heading, while world poses map
    # through the corresponding rotation
    task = make_task()
    script = np.array([[1.0, 0.0], [0.8, 0.4], [1.0, -0.2], [0.9, 0.0]])
    theta0 = 2.0 * math.pi / 3.0
    c, s = math.cos(theta0), math.sin(theta0)
    rot = np.array([[c, -s], [s, c]])

    env_a = PushingEnv(task, SimParams(), 1, seed=0, auto_reset=False,
                       fixed_com=0.05, init_poses=np.array([[0.0, 0.0, 0.0]]))
    env_b = PushingEnv(task, SimParams(), 1, seed=0, auto_reset=False,
                       fixed_com=0.05, init_poses=np.array([[0.0, 0.0, theta0]]))
    for k in range(script.shape[0]):
        sa = env_a.step(script[k][None, :])
        sb = env_b.step(script[k][None, :])
    assert sb.actor_obs == pytest.approx(sa.actor_obs, abs=1e-9)
    assert env_b.sim.origin[0] == pytest.approx(rot @ env_a.sim.origin[0], abs=1e-9)
    assert float(wrap_angle(env_b.sim.theta[0] - env_a.sim.theta[0] - theta0)) == pytest.approx(0.0, abs=1e-9)


def test_env_rollouts_are_reproducible():
    task = make_task()
    traj = []
    for _ in range(2):
        env = PushingEnv(task, SimParams(), 4, seed=21)
        rng = np.random.default_rng(3)
        frames = []
        for _ in range(50):
            sb = env.step(rng.uniform(-1.0, 1.0, size=(4, 2)))
            frames.append(np.concatenate([sb.actor_obs.ravel(), sb.reward]))
        traj.append(np.concatenate(frames))
    assert np.array_equal(traj[0], traj[1])


def test_batch_row_matches_single_env():
    task = make_task(episode_horizon=80)
    env1 = PushingEnv(task, SimParams(), 1, seeds=[101], auto_reset=False)
    env2 = PushingEnv(task, SimParams(), 2, seeds=[101, 7], auto_reset=False)

    def push_forward(obs):
        return np.tile([1.0, 0.0], (obs.shape[0], 1))

    rec1 = batch_rollout(env1, push_forward, 80)
    rec2 = batch_rollout(env2, push_forward, 80)
    r1 = rec1[0]
    r2 = next(r for r in rec2 if r.true_com == r1.true_com)
    assert np.array_equal(r1.feats, r2.feats)
    assert np.array_equal(r1.rewards, r2.rewards)
    assert r1.success == r2.success and r1.length == r2.length


def test_batch_rollout_record_integrity():
    task = make_task(episode_horizon=40)
    env = PushingEnv(task, SimParams(), 6, seed=13, auto_reset=False)
    rng = np.random.default_rng(14)

    def policy(obs):
        return rng.uniform(-1.0, 1.0, size=(obs.shape[0], 2))

    records = batch_rollout(env, policy, 40)
    assert len(records) == 6
    for r in records:
        assert r.feats.shape == (r.length, 6)
        assert r.actions.shape == (r.length, 2)
        assert r.rewards.shape == (r.length,)
        assert r.contact.dtype == bool
        assert np.all(r.conditioned == r.true_com)  # ground-truth conditioning
        if r.success:
            assert r.completion_time == pytest.approx(r.length * env.control_period)
        else:
            assert r.completion_time is None
        assert -0.035 <= r.true_com <= 0.075


def test_estimator_hook_drives_conditioning_channel():
    task = make_task(conditioning_mode="external_estimate", episode_horizon=12)
    env = PushingEnv(task, SimParams(), 3, seed=17, auto_reset=False)
    calls = []

    def hook(feats, prev_action):
        assert feats.shape == (3, 6) and prev_action.shape == (3, 2)
        calls.append(1)
        values = np.full(3, 0.033)
        trace = {"theta_fused": values.copy(), "sigma_fused": np.full(3, np.nan)}
        return values, trace

    records = batch_rollout(env, lambda obs: np.tile([1.0, 0.0], (3, 1)), 12, estimator_hook=hook)
    assert len(calls) == 12
    for r in records:
        assert np.all(r.conditioned == 0.033)
        assert r.estimates["theta_fused"] == pytest.approx(np.full(r.length, 0.033))
        line = json.loads(r.jsonl_lines()[0])
        assert line["conditioned"] == 0.033
        assert line["sigma_fused"] is None  # NaN trace entries serialize as null


def test_jsonl_round_trip_of_episode_record():
    task = make_task(episode_horizon=15)
    env = PushingEnv(task, SimParams(), 1, seed=19, auto_reset=False)
    records = batch_rollout(env, lambda obs: np.tile([1.0, 0.0], (1, 1)), 15)
    r = records[0]
    lines = r.jsonl_lines()
    assert len(lines) == r.length + 1
    rows = [json.loads(x) for x in lines]
    final = rows[-1]
    assert final["final"] is True
    assert final["length"] == r.length
    assert final["success"] == r.success
    assert final["true_com"] == pytest.approx(r.true_com, abs=1e-9)
    for t, row in enumerate(rows[:-1]):
        assert row["t"] == t
        assert row["reward"] == pytest.approx(r.rewards[t], abs=1e-8)
        assert len(row["obs"]) == 6 and len(row["action"]) == 2


def test_auto_reset_starts_fresh_episodes():
    task = make_task(goal_pose=(0.06, 0.0, 0.0), episode_horizon=30)
    env = PushingEnv(task, SimParams(), 4, seed=23, auto_reset=True)
    dones = 0
    for _ in range(120):
        sb = env.step(np.tile([1.0, 0.0], (4, 1)))
        dones += int(np.sum(sb.done))
        assert not env.done.any()  # auto-reset leaves no row finished
    assert dones >= 16


def test_goal_inside_tolerance_trips_reset_guard():
    task = make_task(goal_pose=(0.02, 0.0, 0.0))  # closer than the position tolerance
    with pytest.raises(InvalidReset):
        env = PushingEnv(task, SimParams(), 1, seed=0, auto_reset=True)
        env.step(np.zeros((1, 2)))
