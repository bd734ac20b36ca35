"""Episode-based value-decomposition training for Spread.

Two policy families share this machinery: a parameter-shared per-agent GRU
network (the distributed baseline) and a centralized GLPE network that reads
the whole joint observation. Both are trained through a VDN or QMIX mixer
with hard-updated target copies.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import NonFiniteError, Tensor, no_grad
from ..checkpoint import ManifestError, load_checkpoint, save_checkpoint
from ..layers import GlpeNetwork, Module, build_cpe_policy, build_distributed_policy
from ..spread import N_ACTIONS, SpreadConfig, SpreadEnv
from .buffer import Episode, EpisodeBatch, EpisodeBuffer
from .mixers import build_mixer

log = logging.getLogger(__name__)

POLICY_KINDS = ("distributed", "glpe")
METRICS_HEADER = ("seed", "env_steps", "mean_test_return", "std_test_return", "epsilon", "loss")


class EnvironmentContractError(RuntimeError):
    """Raised when an agent has no available action."""


@dataclass
class TrainConfig:
    total_steps: int = 500_000
    batch_size: int = 32
    buffer_size: int = 5000
    lr: float = 5e-4
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal: int = 50_000
    target_update_interval: int = 200
    grad_clip: float = 10.0
    standardise_rewards: bool = True
    hidden_dim: int = 64
    mixing_embed_dim: int = 32
    hypernet_dim: int = 64
    agent_id: bool = True
    last_action: bool = True
    eval_every: int = 10_000
    eval_episodes: int = 20
    checkpoint_every: int = 100_000
    policy: str = "glpe"
    mixer: str = "qmix"


def epsilon_at(env_steps: int, config: TrainConfig) -> float:
    frac = min(env_steps / config.epsilon_anneal, 1.0) if config.epsilon_anneal > 0 else 1.0
    return max(config.epsilon_finish, config.epsilon_start - (config.epsilon_start - config.epsilon_finish) * frac)


def build_policy(kind: str, obs_dim: int, rng: np.random.Generator, hidden: int = 64) -> GlpeNetwork:
    if kind == "glpe":
        return build_cpe_policy(obs_dim, N_ACTIONS, rng, hidden)
    if kind == "distributed":
        return build_distributed_policy(obs_dim, N_ACTIONS, rng, hidden)
    raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


# -- acting ---------------------------------------------------------------

def choose_actions(q: np.ndarray, avail: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy per agent over available actions; greedy ties go to the lowest index."""
    q = np.asarray(q, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    counts = avail.sum(axis=-1)
    if (counts == 0).any():
        raise EnvironmentContractError("an agent has no available action")
    masked = np.where(avail, q, -np.inf)
    greedy = np.argmax(masked, axis=-1)
    explore = rng.random(len(q)) < epsilon
    picks = rng.integers(0, counts)
    random_actions = np.array([np.flatnonzero(row)[k] for row, k in zip(avail, picks)])
    return np.where(explore, random_actions, greedy)


def select_actions(policy: GlpeNetwork, joint_obs: np.ndarray, hiddens, epsilon: float,
                   rng: np.random.Generator, avail: Optional[np.ndarray] = None):
    """Run the policy on one joint observation [N, d] and pick a joint action."""
    with no_grad():
        q, hiddens = policy(Tensor(joint_obs), hiddens)
    if avail is None:
        avail = np.ones(q.shape, dtype=bool)
    return choose_actions(q.data, avail, epsilon, rng), hiddens


def rollout(env: SpreadEnv, policy: GlpeNetwork, epsilon: float, rng: np.random.Generator,
            trace: Optional[list] = None) -> Tuple[Episode, float]:
    n = env.config.n_agents
    obs = env.reset()
    hiddens = policy.initial_hiddens((n,))
    obs_l, state_l, avail_l, act_l, rew_l, term_l = [obs], [env.global_state()], [], [], [], []
    done = False
    total = 0.0
    while not done:
        avail = np.ones((n, N_ACTIONS))
        actions, hiddens = select_actions(policy, obs, hiddens, epsilon, rng, avail)
        t = env.state.t
        obs, r, done = env.step(actions)
        if trace is not None:
            for i in range(n):
                trace.append((t + 1, i, float(env.state.agent_pos[i, 0]), float(env.state.agent_pos[i, 1]),
                              int(actions[i]), r))
        avail_l.append(avail)
        act_l.append(actions)
        rew_l.append(r)
        term_l.append(float(done))
        obs_l.append(obs)
        state_l.append(env.global_state())
        total += r
    avail_l.append(np.ones((n, N_ACTIONS)))
    ep = Episode(np.array(obs_l), np.array(state_l), np.array(avail_l), np.array(act_l, dtype=np.int64),
                 np.array(rew_l), np.array(term_l))
    return ep, total


def random_policy_returns(env_config: SpreadConfig, episodes: int, seed: int) -> List[float]:
    """Returns of the uniform-random joint policy over a fixed set of evaluation episodes."""
    env = SpreadEnv(env_config, rng=np.random.default_rng([seed, 99]))
    rng = np.random.default_rng([seed, 98])
    out = []
    for _ in range(episodes):
        env.reset()
        done, total = False, 0.0
        while not done:
            _, r, done = env.step(rng.integers(0, N_ACTIONS, size=env_config.n_agents))
            total += r
        out.append(total)
    return out


def greedy_returns(policy: GlpeNetwork, env_config: SpreadConfig, train_config: TrainConfig, episodes: int,
                   seed: int, trace: Optional[list] = None) -> List[float]:
    """Greedy returns over the evaluation episodes derived from ``seed`` (identical set on every call)."""
    env = SpreadEnv(env_config, rng=np.random.default_rng([seed, 99]), agent_id=train_config.agent_id,
                    last_action=train_config.last_action)
    rng = np.random.default_rng([seed, 97])
    out = []
    for k in range(episodes):
        _, total = rollout(env, policy, 0.0, rng, trace=trace if k == 0 else None)
        out.append(total)
    return out


# -- learning -------------------------------------------------------------

def unroll(policy: GlpeNetwork, obs: np.ndarray) -> List[Tensor]:
    """Per-step Q tensors [B, N, A] for a batch of observation sequences [B, T, N, d]."""
    b, t_len, n = obs.shape[:3]
    hiddens = policy.initial_hiddens((b, n))
    out = []
    for t in range(t_len):
        q, hiddens = policy(Tensor(obs[:, t]), hiddens)
        out.append(q)
    return out


def td_loss(batch: EpisodeBatch, policy: GlpeNetwork, mixer: Module, target_policy: GlpeNetwork,
            target_mixer: Module, gamma: float) -> Tensor:
    """Masked mean squared one-step TD error of Q_tot; targets use the target nets' greedy maximum."""
    b, t_len = batch.rewards.shape
    n = batch.actions.shape[2]
    qs = unroll(policy, batch.obs[:, :t_len])
    chosen = ad.stack([ad.gather_last(qs[t], batch.actions[:, t]) for t in range(t_len)], axis=1)
    q_tot = mixer(ad.reshape(chosen, (b * t_len, n)), batch.state[:, :t_len].reshape(b * t_len, -1))
    q_tot = ad.reshape(q_tot, (b, t_len))

    with no_grad():
        target_qs = np.stack([q.data for q in unroll(target_policy, batch.obs)], axis=1)[:, 1:]
        target_qs = np.where(batch.avail[:, 1:] > 0, target_qs, -1e10).max(axis=-1)
        target_tot = target_mixer(Tensor(target_qs.reshape(b * t_len, n)),
                                  batch.state[:, 1:].reshape(b * t_len, -1)).data.reshape(b, t_len)
    targets = batch.rewards + gamma * (1.0 - batch.terminated) * target_tot
    return ad.masked_mse(q_tot, targets, batch.filled)


class RunningMeanStd:
    """Streaming mean and variance of every reward seen in training batches."""

    def __init__(self, epsilon: float = 1e-4):
        self.mean, self.var, self.count = 0.0, 1.0, epsilon

    def update(self, values: np.ndarray) -> None:
        if values.size == 0:
            return
        b_mean, b_var, b_count = float(values.mean()), float(values.var()), values.size
        delta = b_mean - self.mean
        total = self.count + b_count
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / total
        self.mean += delta * b_count / total
        self.var = m2 / total
        self.count = total

    def standardise(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / np.sqrt(self.var)


class Learner:
    """Policy, mixer, their target copies and the optimizer."""

    def __init__(self, policy_kind: str, mixer_kind: str, env_config: SpreadConfig, config: TrainConfig,
                 rng: np.random.Generator):
        self.policy_kind, self.mixer_kind = policy_kind, mixer_kind
        self.config = config
        self.env_config = env_config
        self.obs_dim = env_config.obs_dim(config.agent_id, config.last_action)
        n, s = env_config.n_agents, env_config.state_dim
        self.policy = build_policy(policy_kind, self.obs_dim, rng, config.hidden_dim)
        self.mixer = build_mixer(mixer_kind, n, s, rng, config.mixing_embed_dim, config.hypernet_dim)
        self.target_policy = build_policy(policy_kind, self.obs_dim, np.random.default_rng(0), config.hidden_dim)
        self.target_mixer = build_mixer(mixer_kind, n, s, np.random.default_rng(0), config.mixing_embed_dim,
                                        config.hypernet_dim)
        self.update_targets()
        self.params = self.policy.parameters() + self.mixer.parameters()
        self.optimizer = ad.Adam(self.params, lr=config.lr)
        self.reward_stats = RunningMeanStd()
        self.train_steps = 0

    def update_targets(self) -> None:
        self.target_policy.load_state_dict(self.policy.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())

    def train_step(self, batch: EpisodeBatch) -> float:
        if self.config.standardise_rewards:
            self.reward_stats.update(batch.rewards[batch.filled > 0])
            batch = replace(batch, rewards=self.reward_stats.standardise(batch.rewards) * batch.filled)
        self.optimizer.zero_grad()
        loss = td_loss(batch, self.policy, self.mixer, self.target_policy, self.target_mixer, self.config.gamma)
        loss.backward()
        ad.clip_grad_norm(self.params, self.config.grad_clip)
        self.optimizer.step()
        self.train_steps += 1
        if self.train_steps % self.config.target_update_interval == 0:
            self.update_targets()
        return loss.item()

    def save(self, directory, **extra) -> Path:
        arrays = {f"policy.{k}": v for k, v in self.policy.state_dict().items()}
        arrays.update({f"mixer.{k}": v for k, v in self.mixer.state_dict().items()})
        meta = {
            "policy_kind": self.policy_kind,
            "mixer_kind": self.mixer_kind,
            "n_agents": self.env_config.n_agents,
            "obs_dim": self.obs_dim,
            "n_actions": N_ACTIONS,
            "hidden_dim": self.config.hidden_dim,
            "agent_id": int(self.config.agent_id),
            "last_action": int(self.config.last_action),
        }
        meta.update(extra)
        return save_checkpoint(directory, arrays, meta)


def load_policy(checkpoint) -> Tuple[GlpeNetwork, dict]:
    meta, arrays = load_checkpoint(checkpoint)
    try:
        kind = meta["policy_kind"]
        obs_dim, hidden = int(meta["obs_dim"]), int(meta["hidden_dim"])
    except KeyError as exc:
        raise ManifestError(f"checkpoint manifest lacks {exc.args[0]!r}") from None
    policy = build_policy(kind, obs_dim, np.random.default_rng(0), hidden)
    state = {k[len("policy."):]: v for k, v in arrays.items() if k.startswith("policy.")}
    try:
        policy.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"checkpoint does not fit a {kind} policy: {exc}") from None
    return policy, meta


def evaluate(checkpoint, env_config: SpreadConfig, episodes: int, seed: int = 0,
             trace_path=None) -> Tuple[float, List[float]]:
    """Greedy mean return of a saved policy plus the per-episode returns."""
    policy, meta = load_policy(checkpoint)
    cfg = TrainConfig(agent_id=bool(int(meta.get("agent_id", 1))), last_action=bool(int(meta.get("last_action", 1))))
    expected = env_config.obs_dim(cfg.agent_id, cfg.last_action)
    if int(meta["obs_dim"]) != expected or int(meta.get("n_agents", env_config.n_agents)) != env_config.n_agents:
        raise ManifestError(f"checkpoint expects obs width {meta['obs_dim']} and {meta.get('n_agents')} agents; "
                            f"environment gives {expected} with {env_config.n_agents}")
    trace = [] if trace_path is not None else None
    returns = greedy_returns(policy, env_config, cfg, episodes, seed, trace)
    if trace_path is not None:
        from ..spread import write_trace

        write_trace(trace_path, trace)
    return float(np.mean(returns)), returns


# -- training loop --------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def train(config: TrainConfig, env_config: SpreadConfig, policy_kind: str, mixer_kind: str, out_dir,
          seed: int = 0) -> dict:
    """Train one (policy, mixer, seed) run, writing ``metrics.csv``, ``summary.json`` and checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_ss, env_ss, act_ss, sample_ss = np.random.SeedSequence([seed, 2024]).spawn(4)
    learner = Learner(policy_kind, mixer_kind, env_config, config, np.random.default_rng(init_ss))
    env = SpreadEnv(env_config, rng=np.random.default_rng(env_ss), agent_id=config.agent_id,
                    last_action=config.last_action)
    act_rng, sample_rng = np.random.default_rng(act_ss), np.random.default_rng(sample_ss)
    buffer = EpisodeBuffer(config.buffer_size)

    learner.save(out_dir / "checkpoints" / "0", env_steps=0, seed=seed)
    baseline = random_policy_returns(env_config, config.eval_episodes, seed)

    rows: List[List[str]] = []
    metrics_path = out_dir / "metrics.csv"

    def flush():
        with metrics_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)

    def eval_row(env_steps, losses):
        returns = greedy_returns(learner.policy, env_config, config, config.eval_episodes, seed)
        loss = _fmt(np.mean(losses)) if losses else "nan"
        rows.append([str(seed), str(env_steps), _fmt(np.mean(returns)), _fmt(np.std(returns)),
                     _fmt(epsilon_at(env_steps, config)), loss])
        flush()
        return float(np.mean(returns))

    env_steps, next_eval, next_ckpt = 0, config.eval_every, config.checkpoint_every
    losses: List[float] = []
    status = "ok"
    last_return = eval_row(0, losses)
    last_eval_step = 0
    try:
        while env_steps < config.total_steps:
            episode, _ = rollout(env, learner.policy, epsilon_at(env_steps, config), act_rng)
            buffer.add(episode)
            env_steps += len(episode)
            if buffer.can_sample(config.batch_size):
                losses.append(learner.train_step(buffer.sample(config.batch_size, sample_rng)))
            if env_steps >= next_eval:
                last_return = eval_row(env_steps, losses)
                last_eval_step = env_steps
                losses = []
                next_eval += config.eval_every
                log.info("seed %d %s-%s steps %d return %.3f", seed, policy_kind, mixer_kind, env_steps, last_return)
            if env_steps >= next_ckpt:
                learner.save(out_dir / "checkpoints" / str(env_steps), env_steps=env_steps, seed=seed)
                next_ckpt += config.checkpoint_every
        if last_eval_step != env_steps:
            last_return = eval_row(env_steps, losses)
    except NonFiniteError as exc:
        status = "diverged"
        log.error("run diverged at %d env steps: %s", env_steps, exc)
        rows.append([str(seed), str(env_steps), "nan", "nan", _fmt(epsilon_at(env_steps, config)), "diverged"])
        flush()

    learner.save(out_dir / "checkpoints" / "final", env_steps=env_steps, seed=seed)
    summary = {
        "seed": seed,
        "policy": policy_kind,
        "mixer": mixer_kind,
        "status": status,
        "env_steps": env_steps,
        "train_steps": learner.train_steps,
        "final_mean_test_return": last_return if status == "ok" else math.nan,
        "random_baseline_return": float(np.mean(baseline)),
        "policy_params": learner.policy.param_count(),
        "mixer_params": learner.mixer.param_count(),
        "train_config": asdict(config),
        "env_config": asdict(env_config),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
