"""Replay storage of whole episodes for recurrent value learning."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Episode:
    """One episode of T steps. Observation-like arrays hold T + 1 entries (the final one included)."""

    obs: np.ndarray          # [T+1, N, d]
    state: np.ndarray        # [T+1, S]
    avail: np.ndarray        # [T+1, N, A]
    actions: np.ndarray      # [T, N]
    rewards: np.ndarray      # [T]
    terminated: np.ndarray   # [T]

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class EpisodeBatch:
    obs: np.ndarray          # [B, T+1, N, d]
    state: np.ndarray        # [B, T+1, S]
    avail: np.ndarray        # [B, T+1, N, A]
    actions: np.ndarray      # [B, T, N]
    rewards: np.ndarray      # [B, T]
    terminated: np.ndarray   # [B, T]
    filled: np.ndarray       # [B, T], 1 for real steps, 0 for padding

    @property
    def max_t(self) -> int:
        return self.rewards.shape[1]


def pad_episodes(episodes: Sequence[Episode], length: int | None = None) -> EpisodeBatch:
    """Stack episodes, zero-padding each to ``length`` steps (default: the longest).

    Padded steps get all actions available so that target maxima stay finite.
    """
    T = max(len(e) for e in episodes) if length is None else length
    if any(len(e) > T for e in episodes):
        raise ValueError("padding length shorter than an episode")
    B = len(episodes)
    e0 = episodes[0]
    n, d = e0.obs.shape[1:]
    s, a = e0.state.shape[1], e0.avail.shape[2]
    obs = np.zeros((B, T + 1, n, d))
    state = np.zeros((B, T + 1, s))
    avail = np.ones((B, T + 1, n, a))
    actions = np.zeros((B, T, n), dtype=np.int64)
    rewards = np.zeros((B, T))
    terminated = np.zeros((B, T))
    filled = np.zeros((B, T))
    for i, e in enumerate(episodes):
        k = len(e)
        obs[i, :k + 1] = e.obs
        state[i, :k + 1] = e.state
        avail[i, :k + 1] = e.avail
        actions[i, :k] = e.actions
        rewards[i, :k] = e.rewards
        terminated[i, :k] = e.terminated
        filled[i, :k] = 1.0
    return EpisodeBatch(obs, state, avail, actions, rewards, terminated, filled)


class EpisodeBuffer:
    """FIFO ring buffer of complete episodes."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._episodes: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, episode: Episode) -> None:
        self._episodes.append(episode)

    def can_sample(self, batch_size: int) -> bool:
        return len(self._episodes) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        if not self.can_sample(batch_size):
            raise ValueError(f"buffer holds {len(self)} episodes, need {batch_size}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return pad_episodes([self._episodes[i] for i in idx])
