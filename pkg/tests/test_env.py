"""Environment: profile, reset calm, stepping, termination, views."""
import numpy as np
import pytest

from peelsim.env import (
    ACTION_AXES,
    FRAMES_PER_STEP,
    OBS_SIZE,
    Action,
    Outcome,
    PeelEnv,
    quintic_profile,
)
from peelsim.geometry import GeometryParams, MeshConfig, sample_params
from peelsim.physics import PhysicsConfig


def identity_params():
    return GeometryParams(dx=0.0, dy=0.0, theta_x=0.0, theta_y=0.0,
                          theta_z=0.0)


# ---------------------------------------------------------------------------
# Quintic profile
# ---------------------------------------------------------------------------

def test_quintic_endpoints_and_midpoint():
    assert quintic_profile(0.0) == 0.0
    assert quintic_profile(1.0) == 1.0
    assert quintic_profile(0.5) == pytest.approx(0.5, abs=1e-15)


def test_quintic_quarter_point():
    # 10/64 - 15/256 + 6/1024, exact in binary floating point.
    assert quintic_profile(0.25) == 0.103515625


def test_quintic_domain_errors():
    with pytest.raises(ValueError):
        quintic_profile(-0.01)
    with pytest.raises(ValueError):
        quintic_profile(1.01)
    with pytest.raises(ValueError):
        quintic_profile(np.array([0.2, 1.2]))


def test_quintic_monotone_and_smooth_ends():
    u = np.linspace(0.0, 1.0, 301)
    s = quintic_profile(u)
    assert np.all(np.diff(s) >= 0)
    # Zero velocity at both ends: first/last increments are tiny.
    assert s[1] < 1e-6 and 1.0 - s[-2] < 1e-6


# ---------------------------------------------------------------------------
# Reset
# ---------------------------------------------------------------------------

def test_reset_observation_shape_and_calm():
    env = PeelEnv()
    obs = env.reset(identity_params())
    assert obs.shape == (OBS_SIZE,)
    assert env.completion_ratio() == 0.0
    assert not env.done
    frames = obs[6:].reshape(FRAMES_PER_STEP, 6)
    # Settled, tared sensor: every frame reads almost no force.
    assert np.max(np.linalg.norm(frames[:, :3], axis=1)) < 0.01


def test_reset_pose_matches_handle():
    env = PeelEnv()
    obs = env.reset(identity_params())
    # Identity scene: handle centroid at (-0.05, 0, 0.01), zero Euler.
    assert np.allclose(obs[:3], [-0.05, 0.0, 0.01], atol=1e-12)
    assert np.allclose(obs[3:6], 0.0, atol=1e-15)


def test_reset_deterministic():
    env = PeelEnv()
    params = sample_params("T3", 42)
    a = env.reset(params, seed=7)
    b = env.reset(params, seed=7)
    assert np.array_equal(a, b)


def test_reset_tilted_scene_is_calm_too():
    env = PeelEnv()
    params = GeometryParams(dx=0.1, dy=-0.2, theta_x=0.3, theta_y=-0.2,
                            theta_z=1.0)
    obs = env.reset(params)
    frames = obs[6:].reshape(FRAMES_PER_STEP, 6)
    assert np.max(np.linalg.norm(frames[:, :3], axis=1)) < 0.01


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def test_action_axes_are_unit_and_distinct():
    assert len(Action) == 6
    assert np.allclose(np.linalg.norm(ACTION_AXES, axis=1), 1.0)
    assert len({tuple(a) for a in ACTION_AXES}) == 6


def test_up_moves_gripper_exactly_delta():
    env = PeelEnv()
    env.reset(identity_params(), pre_broken_rows=MeshConfig().rows)
    z0 = env.state.gripper_pos[2]
    xy0 = env.state.gripper_pos[:2].copy()
    res = env.execute_action(Action.UP)
    assert env.state.gripper_pos[2] == pytest.approx(z0 + env.delta,
                                                     abs=1e-12)
    assert np.allclose(env.state.gripper_pos[:2], xy0, atol=1e-12)
    assert res.observation.shape == (OBS_SIZE,)


def test_commanded_path_is_axis_aligned():
    env = PeelEnv()
    env.reset(identity_params())
    for action in (Action.LEFT, Action.FORWARD, Action.DOWN):
        start = env.state.gripper_pos.copy()
        env.execute_action(action)
        moved = env.state.gripper_pos - start
        axis = ACTION_AXES[action]
        off = moved - np.dot(moved, axis) * axis
        assert np.max(np.abs(off)) < 1e-12


def test_step_rejected_after_done():
    env = PeelEnv(max_steps=1)
    env.reset(identity_params())
    res = env.execute_action(Action.DOWN)
    assert res.done and res.outcome is Outcome.TIME_LIMIT
    with pytest.raises(RuntimeError):
        env.execute_action(Action.UP)


def test_time_limit_outcome():
    env = PeelEnv(max_steps=3)
    env.reset(identity_params())
    outcomes = [env.execute_action(Action.DOWN) for _ in range(3)]
    assert [r.done for r in outcomes] == [False, False, True]
    assert outcomes[-1].outcome is Outcome.TIME_LIMIT
    assert env.steps == 3


def test_last_row_break_reports_success_and_reward():
    mesh = MeshConfig()
    env = PeelEnv(mesh=mesh)
    env.reset(identity_params(), pre_broken_rows=mesh.rows - 1)
    assert env.completion_ratio() == pytest.approx((mesh.rows - 1) / mesh.rows)
    total_reward = 0
    for _ in range(200):
        res = env.execute_displacement(
            env.delta * np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0))
        total_reward += res.reward
        if res.done:
            break
    assert res.outcome is Outcome.SUCCESS
    assert total_reward == mesh.cols
    assert env.completion_ratio() == 1.0


def test_reward_sum_equals_broken_count():
    env = PeelEnv()
    env.reset(identity_params())
    rewards = 0
    for _ in range(60):
        res = env.execute_action(Action.UP)
        rewards += res.reward
        assert res.reward >= 0
        if res.done:
            break
    assert rewards == int(env.state.broken.sum())
    assert (res.outcome is Outcome.SUCCESS) == (env.completion_ratio() == 1.0)


def test_completion_is_monotone():
    env = PeelEnv()
    env.reset(identity_params())
    last = 0.0
    for _ in range(30):
        res = env.execute_action(Action.UP)
        now = env.completion_ratio()
        assert now >= last
        last = now
        if res.done:
            break


def test_divergence_ends_episode_as_grip_lost():
    env = PeelEnv()
    env.reset(identity_params())
    env.state.positions[0, 0] = np.nan
    res = env.execute_action(Action.UP)
    assert res.done and res.outcome is Outcome.GRIP_LOST
    assert res.reward == 0
    assert np.all(res.observation[6:] == 0.0)


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

def test_full_state_view_fresh_identity():
    env = PeelEnv()
    env.reset(identity_params())
    view = env.full_state_view()
    assert np.allclose(view.surface_normal, [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(view.peel_tangent, [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(view.boundary_position, [0.0, 0.0, 0.0], atol=1e-12)
    assert view.completion == 0.0


def test_full_state_view_boundary_advances():
    mesh = MeshConfig()
    env = PeelEnv(mesh=mesh)
    env.reset(identity_params())
    env.state.broken[:mesh.cols] = True          # row 0 gone
    view = env.full_state_view()
    row_pitch = mesh.strip_length / (mesh.rows - 1)
    assert np.allclose(view.boundary_position, [row_pitch, 0.0, 0.0],
                       atol=1e-12)
    assert np.allclose(view.peel_tangent, [-1.0, 0.0, 0.0], atol=1e-12)
    assert view.completion == pytest.approx(mesh.cols / (mesh.rows * mesh.cols))


def test_full_state_view_all_broken():
    env = PeelEnv()
    env.reset(identity_params())
    env.state.broken[:] = True
    view = env.full_state_view()
    assert view.completion == 1.0
    assert np.isfinite(view.boundary_position).all()


def test_view_vectors_are_unit_on_sampled_scenes():
    env = PeelEnv()
    for seed in range(5):
        env.reset(sample_params("T3", seed))
        env.state.broken[:np.random.default_rng(seed).integers(0, 39)] = True
        view = env.full_state_view()
        assert np.linalg.norm(view.surface_normal) == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(view.peel_tangent) == pytest.approx(1.0, abs=1e-9)


def test_completion_thirteen_of_thirtynine():
    env = PeelEnv()
    env.reset(identity_params())
    env.state.broken[:13] = True
    assert env.completion_ratio() == pytest.approx(13.0 / 39.0)
