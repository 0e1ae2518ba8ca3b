"""Reference policies and the variant registry used by the evaluation harness.

Every policy exposes ``act(observations, obs_array) -> action indices`` so
trained and training-free variants can be rolled out by the same code.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ganet
from .config import ConfigError, EnvConfig, GANetConfig, TrainerConfig
from .env import Action, Observation, action_index

TRAINING_FREE = ("random", "dga")
TRAINED = ("independent_ac", "maddpg", "ganet_full", "ganet_no_hard", "ganet_no_attn")
KINDS = TRAINING_FREE + TRAINED


def random_policy(obs, rng, cfg: EnvConfig) -> Action:
    """Uniform over channels x power levels; ``obs`` is ignored."""
    k = int(rng.integers(cfg.n_actions))
    return Action(k // cfg.n_power_levels, k % cfg.n_power_levels)


def dga_policy(obs: Observation, cfg: EnvConfig) -> Action:
    """Least-RSSI channel at maximum power; ties go to the lowest channel index."""
    return Action(int(np.argmin(np.asarray(obs.rssi_dbm))), cfg.max_level)


class RandomPolicy:
    def __init__(self, cfg: EnvConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def act(self, observations, obs_array=None):
        return self.rng.integers(self.cfg.n_actions, size=len(observations))

    def distribution(self, observations):
        n = len(observations)
        return np.full((n, self.cfg.n_actions), 1.0 / self.cfg.n_actions)


class DGAPolicy:
    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg

    def act(self, observations, obs_array=None):
        return np.array([action_index(dga_policy(o, self.cfg), self.cfg) for o in observations])

    def distribution(self, observations):
        out = np.zeros((len(observations), self.cfg.n_actions))
        out[np.arange(len(observations)), self.act(observations)] = 1.0
        return out


class FixedPolicy:
    """Replays the same per-agent action every TTI (e.g. all-off, or a fixed channel split)."""

    def __init__(self, actions, cfg: EnvConfig):
        self.cfg = cfg
        self.indices = np.array([a if np.ndim(a) == 0 else action_index(Action(*a), cfg) for a in actions])

    def act(self, observations, obs_array=None):
        return self.indices.copy()


def all_off(cfg: EnvConfig) -> FixedPolicy:
    return FixedPolicy([(0, cfg.off_level)] * cfg.n_subnetworks, cfg)


@dataclass
class PolicyVariant:
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy variant {self.kind!r}; expected one of {', '.join(KINDS)}")

    @property
    def trained(self) -> bool:
        return self.kind in TRAINED


def trainer_config_for(kind: str, base: TrainerConfig) -> TrainerConfig:
    """Trainer settings for a trained variant; ablations keep every other hyperparameter."""
    if kind == "independent_ac":
        return base.replace(algorithm="independent_ac")
    if kind == "maddpg":
        return base.replace(algorithm="maddpg")
    attention = {"ganet_full": "full", "ganet_no_hard": "no_hard", "ganet_no_attn": "no_attn"}.get(kind)
    if attention is None:
        raise ConfigError(f"{kind!r} is not a trained variant")
    return base.replace(algorithm="ganet", ganet=dataclasses.replace(base.ganet, attention=attention))


def ganet_ablation(kind: str, n_agents: int, obs_dim: int, n_actions: int,
                   cfg: Optional[GANetConfig] = None) -> ganet.GANetCritic:
    attention = {"ganet_no_hard": "no_hard", "ganet_no_attn": "no_attn"}.get(kind)
    if attention is None:
        raise ConfigError(f"ablation kind must be ganet_no_hard or ganet_no_attn, got {kind!r}")
    cfg = dataclasses.replace(cfg or GANetConfig(), attention=attention)
    return ganet.GANetCritic(n_agents, obs_dim, n_actions, cfg)


def training_free_policy(kind: str, cfg: EnvConfig, seed: int = 0):
    if kind == "random":
        return RandomPolicy(cfg, seed)
    if kind == "dga":
        return DGAPolicy(cfg)
    raise ConfigError(f"{kind!r} needs training or a checkpoint")
