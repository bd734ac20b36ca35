import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glpe_marl.spread import (N_ACTIONS, Action, EpisodeFinishedError, SpreadConfig, SpreadEnv, SpreadState,
                              global_state, observe, reset, reward, step, write_trace)


def state_from(agent_pos, landmark_pos, vel=None):
    agent_pos = np.asarray(agent_pos, dtype=float)
    vel = np.zeros_like(agent_pos) if vel is None else np.asarray(vel, dtype=float)
    return SpreadState(agent_pos, vel, np.asarray(landmark_pos, dtype=float), 0)


class TestReset:
    def test_same_seed_same_state(self):
        cfg = SpreadConfig(n_agents=3)
        a, oa = reset(cfg, np.random.default_rng(5))
        b, ob = reset(cfg, np.random.default_rng(5))
        assert a.agent_pos.tobytes() == b.agent_pos.tobytes()
        assert a.landmark_pos.tobytes() == b.landmark_pos.tobytes()
        assert oa.tobytes() == ob.tobytes()

    def test_zero_velocity_and_spawn_box(self):
        s, _ = reset(SpreadConfig(n_agents=5), np.random.default_rng(0))
        assert not s.agent_vel.any()
        assert np.abs(s.agent_pos).max() <= 1.0 and np.abs(s.landmark_pos).max() <= 1.0


class TestStep:
    def test_agents_on_landmarks(self):
        cfg = SpreadConfig(n_agents=3)
        lm = [[-0.5, 0.0], [0.5, 0.0], [0.0, 0.8]]
        _, _, r, _ = step(cfg, state_from(lm, lm), [Action.NO_MOVE] * 3)
        assert r == 0.0

    def test_collision_counts_both_agents(self):
        cfg = SpreadConfig(n_agents=2, collision_penalty=1.0)
        s = state_from([[0.2, 0.2], [0.2, 0.2]], [[0.2, 0.2], [0.9, 0.9]])
        coverage = np.hypot(0.7, 0.7)
        assert reward(cfg, s) == pytest.approx(-coverage - 2.0, abs=1e-12)

    def test_right_from_rest(self):
        cfg = SpreadConfig(n_agents=2)
        s = state_from([[0.0, 0.0], [0.5, 0.5]], [[1.0, 1.0], [-1.0, -1.0]])
        nxt, _, _, _ = step(cfg, s, [Action.RIGHT, Action.NO_MOVE])
        assert nxt.agent_pos[0, 0] == pytest.approx(0.05, abs=1e-15)
        assert nxt.agent_pos[0, 1] == 0.0
        np.testing.assert_array_equal(nxt.agent_pos[1], [0.5, 0.5])

    def test_directions(self):
        cfg = SpreadConfig(n_agents=4)
        s = state_from(np.zeros((4, 2)), np.ones((4, 2)))
        nxt, _, _, _ = step(cfg, s, [Action.LEFT, Action.RIGHT, Action.DOWN, Action.UP])
        np.testing.assert_allclose(nxt.agent_pos, [[-0.05, 0], [0.05, 0], [0, -0.05], [0, 0.05]], atol=1e-15)

    def test_dissipation(self):
        cfg = SpreadConfig(n_agents=2, episode_length=400)
        s = state_from([[0.0, 0.0], [0.3, 0.1]], np.zeros((2, 2)), vel=[[1.0, -0.5], [0.2, 0.3]])
        speed = np.linalg.norm(s.agent_vel, axis=1)
        while speed.max() >= 1e-12:
            s, _, _, _ = step(cfg, s, [Action.NO_MOVE] * 2)
            new = np.linalg.norm(s.agent_vel, axis=1)
            np.testing.assert_allclose(new, 0.75 * speed, rtol=1e-12)
            assert np.all(new < speed)
            speed = new

    def test_stepping_finished_episode(self):
        cfg = SpreadConfig(n_agents=2, episode_length=2)
        s, _ = reset(cfg, np.random.default_rng(0))
        for i in range(2):
            s, _, _, done = step(cfg, s, [0, 0])
        assert done
        with pytest.raises(EpisodeFinishedError):
            step(cfg, s, [0, 0])

    def test_bad_action(self):
        cfg = SpreadConfig(n_agents=2)
        s, _ = reset(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            step(cfg, s, [0, 5])

    def test_physics_is_deterministic(self):
        cfg = SpreadConfig(n_agents=3)
        s, _ = reset(cfg, np.random.default_rng(1))
        a = step(cfg, s.copy(), [1, 2, 3])[0]
        b = step(cfg, s.copy(), [1, 2, 3])[0]
        assert a.agent_pos.tobytes() == b.agent_pos.tobytes() and a.agent_vel.tobytes() == b.agent_vel.tobytes()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_reward_never_positive(self, n, seed):
        cfg = SpreadConfig(n_agents=n)
        rng = np.random.default_rng(seed)
        s, _ = reset(cfg, rng)
        for _ in range(5):
            s, _, r, _ = step(cfg, s, rng.integers(0, N_ACTIONS, size=n))
            assert r <= 0.0


class TestObservation:
    def test_layout_and_reconstruction(self):
        cfg = SpreadConfig(n_agents=4)
        s, obs = reset(cfg, np.random.default_rng(2))
        assert obs.shape == (4, 4 + 8)
        for i in range(4):
            pos = obs[i, 2:4]
            rel = obs[i, 4:].reshape(4, 2)
            np.testing.assert_allclose(rel + pos, s.landmark_pos, rtol=0, atol=1e-12)
        assert observe(cfg, s).tobytes() == observe(cfg, s).tobytes()

    def test_optional_blocks(self):
        cfg = SpreadConfig(n_agents=3)
        s, _ = reset(cfg, np.random.default_rng(0))
        obs = observe(cfg, s, last_actions=[4, 0, 2], agent_id=True, last_action=True)
        assert obs.shape == (3, cfg.obs_dim(True, True)) == (3, 10 + 3 + 5)
        np.testing.assert_array_equal(obs[:, 10:13], np.eye(3))
        np.testing.assert_array_equal(obs[:, 13:].argmax(axis=1), [4, 0, 2])

    def test_last_action_starts_at_zero(self):
        env = SpreadEnv(SpreadConfig(n_agents=2), np.random.default_rng(0), agent_id=True, last_action=True)
        obs = env.reset()
        assert not obs[:, -N_ACTIONS:].any()
        obs, _, _ = env.step([3, 1])
        np.testing.assert_array_equal(obs[:, -N_ACTIONS:].argmax(axis=1), [3, 1])

    def test_global_state(self):
        cfg = SpreadConfig(n_agents=3)
        s, obs = reset(cfg, np.random.default_rng(0))
        g = global_state(cfg, s)
        assert g.shape == (3 * (4 + 6),) == (cfg.state_dim,)
        assert not g.reshape(3, -1)[:, :2].any()
        perm = np.array([2, 0, 1])
        moved = SpreadState(s.agent_pos[perm], s.agent_vel[perm], s.landmark_pos, 0)
        np.testing.assert_array_equal(global_state(cfg, moved).reshape(3, -1), g.reshape(3, -1)[perm])


def test_config_validation():
    with pytest.raises(ValueError):
        SpreadConfig(n_agents=1)
    with pytest.raises(ValueError):
        SpreadConfig(damping=1.5)


def test_trace_csv(tmp_path):
    write_trace(tmp_path / "t.csv", [(1, 0, 0.5, -0.25, 2, -1.0)])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["t,agent,pos_x,pos_y,action,reward",
                                                             "1,0,0.5,-0.25,2,-1.0"]
