"""Mixing networks that combine per-agent Q-values into Q_tot."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import DimensionError, Tensor
from ..layers import Linear, Module


class VdnMixer(Module):
    """Q_tot is the plain sum of the agents' values."""

    def __init__(self, n_agents: int, state_dim: int = 0, rng=None):
        super().__init__()
        self.n_agents = n_agents

    def __call__(self, agent_qs: Tensor, states=None) -> Tensor:
        if agent_qs.shape[-1] != self.n_agents:
            raise DimensionError(f"expected {self.n_agents} agent values, got {agent_qs.shape}")
        return ad.sum_axis(agent_qs, -1)


class _TwoLayer(Module):
    def __init__(self, d_in, d_hidden, d_out, rng):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


class QmixMixer(Module):
    """State-conditioned monotonic mixer.

    Hypernetworks map the global state to the mixing weights, which pass
    through an absolute value so that Q_tot is non-decreasing in every
    agent's Q. Biases are unconstrained.
    """

    def __init__(self, n_agents: int, state_dim: int, rng: np.random.Generator,
                 embed_dim: int = 32, hypernet_dim: int = 64):
        super().__init__()
        self.n_agents, self.state_dim, self.embed_dim = n_agents, state_dim, embed_dim
        self.hyper_w1 = _TwoLayer(state_dim, hypernet_dim, n_agents * embed_dim, rng)
        self.hyper_b1 = Linear(state_dim, embed_dim, rng)
        self.hyper_w_final = _TwoLayer(state_dim, hypernet_dim, embed_dim, rng)
        self.hyper_v = _TwoLayer(state_dim, embed_dim, 1, rng)

    def __call__(self, agent_qs: Tensor, states) -> Tensor:
        """``agent_qs`` [M, N] and ``states`` [M, S] give Q_tot of shape [M]."""
        states = ad.as_tensor(states)
        m = agent_qs.shape[0]
        if agent_qs.shape != (m, self.n_agents) or states.shape != (m, self.state_dim):
            raise DimensionError(f"mixer got qs {agent_qs.shape} and states {states.shape}")
        e = self.embed_dim
        w1 = ad.reshape(ad.abs_(self.hyper_w1(states)), (m, self.n_agents, e))
        b1 = ad.reshape(self.hyper_b1(states), (m, 1, e))
        qs = ad.reshape(agent_qs, (m, 1, self.n_agents))
        hidden = ad.elu(ad.add(ad.matmul(qs, w1), b1))
        w_final = ad.reshape(ad.abs_(self.hyper_w_final(states)), (m, e, 1))
        v = ad.reshape(self.hyper_v(states), (m, 1, 1))
        q_tot = ad.add(ad.matmul(hidden, w_final), v)
        return ad.reshape(q_tot, (m,))


MIXERS = {"vdn": VdnMixer, "qmix": QmixMixer}


def build_mixer(kind: str, n_agents: int, state_dim: int, rng: np.random.Generator,
                embed_dim: int = 32, hypernet_dim: int = 64) -> Module:
    if kind == "vdn":
        return VdnMixer(n_agents)
    if kind == "qmix":
        return QmixMixer(n_agents, state_dim, rng, embed_dim=embed_dim, hypernet_dim=hypernet_dim)
    raise ValueError(f"unknown mixer {kind!r}; expected one of {sorted(MIXERS)}")
