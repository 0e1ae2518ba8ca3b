"""Multi-subnetwork channel/power selection game.

Each subnetwork is an agent.  Per TTI every agent picks a channel and a
transmit power level; the environment turns the joint action into per-channel
RSSI, uplink SINR, Shannon capacity, payload progress and rewards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import simcore
from .config import EnvConfig


class Action(NamedTuple):
    channel: int
    power_level: int


def action_index(action: Action, cfg: EnvConfig) -> int:
    return int(action.channel) * cfg.n_power_levels + int(action.power_level)


def action_from_index(index: int, cfg: EnvConfig) -> Action:
    return Action(int(index) // cfg.n_power_levels, int(index) % cfg.n_power_levels)


def null_action(cfg: EnvConfig) -> Action:
    return Action(0, cfg.off_level)


def power_mw(cfg: EnvConfig) -> np.ndarray:
    """Linear transmit power per level; the off level is exactly zero."""
    p = simcore.dbm2mw(np.array(cfg.tx_power_levels_dbm))
    p[cfg.off_level] = 0.0
    return p


def noise_mw(cfg: EnvConfig) -> float:
    return float(simcore.dbm2mw(cfg.noise_dbm))


@dataclass
class Observation:
    prev_action: Action
    remaining_payload_norm: float
    remaining_budget_norm: float
    rssi_dbm: np.ndarray

    def vector(self, cfg: EnvConfig) -> np.ndarray:
        return observation_vector(self, cfg)


def observation_vector(obs: Observation, cfg: EnvConfig) -> np.ndarray:
    m, b = cfg.n_channels, cfg.n_power_levels
    v = np.zeros(cfg.obs_dim, dtype=np.float32)
    v[obs.prev_action.channel] = 1.0
    v[m + obs.prev_action.power_level] = 1.0
    v[m + b] = obs.remaining_payload_norm
    v[m + b + 1] = obs.remaining_budget_norm
    v[m + b + 2 :] = (np.asarray(obs.rssi_dbm) - cfg.noise_dbm) / cfg.rssi_scale_db
    return v


def rssi_from_vector(vec, cfg: EnvConfig) -> np.ndarray:
    m, b = cfg.n_channels, cfg.n_power_levels
    return np.asarray(vec[m + b + 2 :]) * cfg.rssi_scale_db + cfg.noise_dbm


def occupation(channels, cfg: EnvConfig) -> np.ndarray:
    """N x M channel occupation indicator (one selected channel per row)."""
    theta = np.zeros((len(channels), cfg.n_channels))
    theta[np.arange(len(channels)), np.asarray(channels, dtype=int)] = 1.0
    return theta


def _as_arrays(actions, cfg: EnvConfig):
    ch = np.fromiter((a[0] for a in actions), dtype=int, count=len(actions))
    lv = np.fromiter((a[1] for a in actions), dtype=int, count=len(actions))
    if ch.min() < 0 or ch.max() >= cfg.n_channels:
        raise ValueError(f"channel index out of range: {ch.tolist()}")
    if lv.min() < 0 or lv.max() >= cfg.n_power_levels:
        raise ValueError(f"power level index out of range: {lv.tolist()}")
    return ch, lv


def signal_mw(gains: simcore.GainSnapshot, levels, cfg: EnvConfig) -> np.ndarray:
    """Own received uplink signal per subnetwork, summed over its sensors."""
    p = power_mw(cfg)[np.asarray(levels, dtype=int)]
    return p * gains.intra.sum(axis=1)


def compute_rssi(gains: simcore.GainSnapshot, actions, cfg: EnvConfig) -> np.ndarray:
    """N x M received power (mW) sensed on every channel.

    Own signal lands only on the selected channel; every other transmitter
    contributes to whichever channel it occupies.
    """
    ch, lv = _as_arrays(actions, cfg)
    theta = occupation(ch, cfg)
    p = power_mw(cfg)[lv]
    # tx_on[j, m] = power j radiates on m
    tx_on = theta * p[:, None]
    cross = gains.cross.copy()
    np.fill_diagonal(cross, 0.0)
    interference = cross @ tx_on
    own = signal_mw(gains, lv, cfg)[:, None] * theta
    return own + interference + noise_mw(cfg)


def sinr_from_rssi(rssi_linear, own_signal_linear):
    """Uplink SINR recovered from the sensed RSSI and the known own signal."""
    rssi = np.asarray(rssi_linear, dtype=float)
    s = np.asarray(own_signal_linear, dtype=float)
    if np.any(s < 0) or np.any(s >= rssi):
        raise ValueError("own signal must be non-negative and below the RSSI it is part of")
    out = s / (rssi - s)
    return out if out.ndim else float(out)


def capacity_bps(sinr, cfg: EnvConfig):
    return cfg.channel_bandwidth_hz * np.log2(1.0 + np.asarray(sinr, dtype=float))


def max_rate_bps(cfg: EnvConfig) -> float:
    """Capacity at maximum power over the intra link, interference-free, no fading."""
    p = power_mw(cfg)[cfg.max_level]
    g = simcore.link_gain(cfg.intra_link_distance_m, cfg) * cfg.n_subcarriers
    return float(capacity_bps(p * g / noise_mw(cfg), cfg))


def eta(cfg: EnvConfig) -> np.ndarray:
    """Per-agent completion reward, a fixed margin above the best normalized rate."""
    return cfg.eta_factor * max_rate_bps(cfg) * cfg.tti_s / np.array(cfg.payloads, dtype=float)


def reward(delivered_normalized, payload_pending, eta_value):
    """Normalized rate while payload is pending at TTI start, ``eta`` afterwards."""
    return np.where(np.asarray(payload_pending, dtype=bool), delivered_normalized, eta_value)


@dataclass
class WorldState:
    mobility: simcore.MobilityState
    fading: simcore.FadingState
    gains: simcore.GainSnapshot
    remaining: np.ndarray  # bits
    budget: int  # TTIs left
    prev_actions: List[Action]
    rssi_mw: np.ndarray  # (N, M) last sensed RSSI
    tti: int = 0
    done: bool = False


@dataclass
class StepResult:
    observations: List[Observation]
    rewards: np.ndarray
    per_channel_capacity: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


class UsageError(RuntimeError):
    pass


class SubnetworkEnv:
    """Partially observable multi-subnetwork game (gym-style reset/step)."""

    def __init__(self, cfg: EnvConfig, seed: Optional[int] = None, record_trace: bool = False):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.record_trace = record_trace
        self.trace: list = []
        self.world: Optional[WorldState] = None
        self._eta = eta(cfg)
        self._payloads = np.array(cfg.payloads, dtype=float)

    @property
    def n_agents(self) -> int:
        return self.cfg.n_subnetworks

    def reset(self, seed: Optional[int] = None) -> List[Observation]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.cfg
        mob = simcore.place_subnetworks(cfg, self.rng)
        fad = simcore.sample_fading(None, cfg, self.rng)
        gains = simcore.compute_gains(mob, fad, cfg, tti=0)
        nulls = [null_action(cfg)] * cfg.n_subnetworks
        rssi = np.full((cfg.n_subnetworks, cfg.n_channels), noise_mw(cfg))
        self.world = WorldState(
            mobility=mob,
            fading=fad,
            gains=gains,
            remaining=self._payloads.copy(),
            budget=cfg.episode_ttis,
            prev_actions=nulls,
            rssi_mw=rssi,
        )
        self.trace = []
        return self.observations()

    def observations(self) -> List[Observation]:
        w, cfg = self.world, self.cfg
        rssi_dbm = simcore.lin2db(w.rssi_mw)
        return [
            Observation(
                prev_action=w.prev_actions[i],
                remaining_payload_norm=float(w.remaining[i] / self._payloads[i]),
                remaining_budget_norm=float(w.budget / cfg.episode_ttis),
                rssi_dbm=rssi_dbm[i].copy(),
            )
            for i in range(cfg.n_subnetworks)
        ]

    def observation_array(self) -> np.ndarray:
        return np.stack([observation_vector(o, self.cfg) for o in self.observations()])

    def step(self, actions: Sequence) -> StepResult:
        if self.world is None:
            raise UsageError("call reset() before step()")
        if self.world.done:
            raise UsageError("episode is finished; call reset()")
        cfg, w = self.cfg, self.world
        if len(actions) != cfg.n_subnetworks:
            raise ValueError(f"expected {cfg.n_subnetworks} actions, got {len(actions)}")
        if not isinstance(actions[0], Action) and np.ndim(actions[0]) == 0:
            actions = [action_from_index(a, cfg) for a in actions]
        ch, lv = _as_arrays(actions, cfg)

        w.mobility = simcore.step_mobility(w.mobility, cfg, self.rng)
        w.fading = simcore.sample_fading(w.fading, cfg, self.rng)
        w.tti += 1
        w.gains = simcore.compute_gains(w.mobility, w.fading, cfg, tti=w.tti)

        rssi = compute_rssi(w.gains, list(zip(ch, lv)), cfg)
        s = signal_mw(w.gains, lv, cfg)
        rssi_sel = rssi[np.arange(cfg.n_subnetworks), ch]
        sinr = sinr_from_rssi(rssi_sel, s)
        cap = capacity_bps(sinr, cfg)

        pending = w.remaining > 0
        bits = cap * cfg.tti_s
        delivered = np.minimum(bits, w.remaining)
        w.remaining = np.maximum(0.0, w.remaining - bits)
        rewards = reward(bits / self._payloads, pending, self._eta)

        w.budget -= 1
        w.prev_actions = [Action(int(c), int(l)) for c, l in zip(ch, lv)]
        w.rssi_mw = rssi
        all_delivered = bool(np.all(w.remaining <= 0))
        w.done = w.budget <= 0 or (cfg.terminate_on_delivery and all_delivered)

        if self.record_trace:
            p_dbm = np.array(cfg.tx_power_levels_dbm)[lv]
            for i in range(cfg.n_subnetworks):
                self.trace.append(
                    {
                        "tti": w.tti,
                        "agent": i,
                        "channel": int(ch[i]),
                        "power_dbm": float(p_dbm[i]),
                        "sinr_db": float(simcore.lin2db(sinr[i])) if sinr[i] > 0 else None,
                        "delivered_bits": float(delivered[i]),
                        "remaining_bits": float(w.remaining[i]),
                        "reward": float(rewards[i]),
                    }
                )

        info = {
            "sinr": sinr,
            "delivered_bits": delivered,
            "remaining_bits": w.remaining.copy(),
            "all_delivered": all_delivered,
            "theta": occupation(ch, cfg),
        }
        return StepResult(self.observations(), rewards, cap, w.done, info)

    def outage(self) -> np.ndarray:
        """Per-agent failure flags for the current episode."""
        return (self.world.remaining > 0).astype(float)


TRACE_FIELDS = ("tti", "agent", "channel", "power_dbm", "sinr_db", "delivered_bits", "remaining_bits", "reward")


def write_trace(rows, path, episode: Optional[int] = None) -> None:
    with open(path, "a") as fh:
        for row in rows:
            rec = {k: row[k] for k in TRACE_FIELDS}
            if episode is not None:
                rec = {"episode": episode, **rec}
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
