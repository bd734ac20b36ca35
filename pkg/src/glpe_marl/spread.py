"""Spread: N point agents must cover N landmarks; agents never observe each other.

Observation of agent i, in order::

    vel_x, vel_y, pos_x, pos_y, (lm_j_x - pos_x, lm_j_y - pos_y) for j = 1..N
    [one-hot agent id, length N]   (optional)
    [one-hot last action, length 5] (optional, zeros before the first step)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


class Action(IntEnum):
    NO_MOVE = 0
    LEFT = 1
    RIGHT = 2
    DOWN = 3
    UP = 4


N_ACTIONS = len(Action)

_DIRECTIONS = np.array([[0.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an episode that has reached its horizon."""


@dataclass(frozen=True)
class SpreadConfig:
    n_agents: int = 4
    episode_length: int = 25
    dt: float = 0.1
    damping: float = 0.25
    force_mag: float = 5.0
    agent_radius: float = 0.15
    spawn_range: float = 1.0
    collision_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("Spread needs at least 2 agents")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")
        for name in ("dt", "force_mag", "agent_radius", "spawn_range", "collision_penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")

    @property
    def base_obs_dim(self) -> int:
        return 4 + 2 * self.n_agents

    def obs_dim(self, agent_id: bool = False, last_action: bool = False) -> int:
        return self.base_obs_dim + (self.n_agents if agent_id else 0) + (N_ACTIONS if last_action else 0)

    @property
    def state_dim(self) -> int:
        return self.n_agents * self.base_obs_dim


@dataclass
class SpreadState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    landmark_pos: np.ndarray
    t: int = 0

    def copy(self) -> "SpreadState":
        return SpreadState(self.agent_pos.copy(), self.agent_vel.copy(), self.landmark_pos.copy(), self.t)


def observe(config: SpreadConfig, state: SpreadState, last_actions: Optional[Sequence[int]] = None,
            agent_id: bool = False, last_action: bool = False) -> np.ndarray:
    """Joint observation, shape [N, obs_dim]."""
    n = config.n_agents
    rel = state.landmark_pos[None, :, :] - state.agent_pos[:, None, :]
    parts = [state.agent_vel, state.agent_pos, rel.reshape(n, 2 * n)]
    if agent_id:
        parts.append(np.eye(n))
    if last_action:
        onehot = np.zeros((n, N_ACTIONS))
        if last_actions is not None:
            onehot[np.arange(n), np.asarray(last_actions, dtype=np.int64)] = 1.0
        parts.append(onehot)
    return np.concatenate(parts, axis=1)


def global_state(config: SpreadConfig, state: SpreadState) -> np.ndarray:
    """Concatenated base observations in agent order, length N * (4 + 2N)."""
    return observe(config, state).reshape(-1)


def reward(config: SpreadConfig, state: SpreadState) -> float:
    dist = np.linalg.norm(state.landmark_pos[:, None, :] - state.agent_pos[None, :, :], axis=-1)
    coverage = dist.min(axis=1).sum()
    diff = state.agent_pos[:, None, :] - state.agent_pos[None, :, :]
    close = np.linalg.norm(diff, axis=-1) < 2.0 * config.agent_radius
    np.fill_diagonal(close, False)
    return float(-coverage - config.collision_penalty * close.sum())


def reset(config: SpreadConfig, rng: np.random.Generator) -> Tuple[SpreadState, np.ndarray]:
    n, r = config.n_agents, config.spawn_range
    agent_pos = rng.uniform(-r, r, size=(n, 2))
    landmark_pos = rng.uniform(-r, r, size=(n, 2))
    state = SpreadState(agent_pos, np.zeros((n, 2)), landmark_pos, 0)
    return state, observe(config, state)


def step(config: SpreadConfig, state: SpreadState, joint_action: Sequence[int]
         ) -> Tuple[SpreadState, np.ndarray, float, bool]:
    if state.t >= config.episode_length:
        raise EpisodeFinishedError(f"episode finished at t={state.t}")
    actions = np.asarray(joint_action, dtype=np.int64)
    if actions.shape != (config.n_agents,) or actions.min() < 0 or actions.max() >= N_ACTIONS:
        raise ValueError(f"expected {config.n_agents} actions in [0, {N_ACTIONS}), got {joint_action!r}")
    force = config.force_mag * _DIRECTIONS[actions]
    vel = state.agent_vel * (1.0 - config.damping) + force * config.dt
    pos = state.agent_pos + vel * config.dt
    nxt = SpreadState(pos, vel, state.landmark_pos.copy(), state.t + 1)
    return nxt, observe(config, nxt), reward(config, nxt), nxt.t == config.episode_length


class SpreadEnv:
    """Stateful wrapper with its own RNG stream; also tracks last actions for observations."""

    def __init__(self, config: SpreadConfig, rng: Optional[np.random.Generator] = None,
                 agent_id: bool = False, last_action: bool = False):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.agent_id = agent_id
        self.last_action = last_action
        self.state: Optional[SpreadState] = None
        self._last: Optional[np.ndarray] = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim(self.agent_id, self.last_action)

    def _obs(self) -> np.ndarray:
        return observe(self.config, self.state, self._last, self.agent_id, self.last_action)

    def reset(self) -> np.ndarray:
        self.state, _ = reset(self.config, self.rng)
        self._last = None
        return self._obs()

    def step(self, joint_action) -> Tuple[np.ndarray, float, bool]:
        self.state, _, r, done = step(self.config, self.state, joint_action)
        self._last = np.asarray(joint_action, dtype=np.int64)
        return self._obs(), r, done

    def global_state(self) -> np.ndarray:
        return global_state(self.config, self.state)


def write_trace(path, rows: List[tuple]) -> None:
    """Episode trace CSV with columns t, agent, pos_x, pos_y, action, reward."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "agent", "pos_x", "pos_y", "action", "reward"])
        for row in rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4], repr(row[5])])
