from .buffer import Episode, EpisodeBatch, EpisodeBuffer, pad_episodes
from .learner import (Learner, TrainConfig, choose_actions, epsilon_at, evaluate, select_actions, td_loss,
                      train)
from .mixers import QmixMixer, VdnMixer, build_mixer

__all__ = [
    "Episode", "EpisodeBatch", "EpisodeBuffer", "pad_episodes", "Learner", "TrainConfig", "choose_actions",
    "epsilon_at", "evaluate", "select_actions", "td_loss", "train", "QmixMixer", "VdnMixer", "build_mixer",
]
