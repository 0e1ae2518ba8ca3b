"""Run configuration: environment, trainer and experiment settings.

Everything a run depends on lives in one of the three dataclasses below, so a
run is reproducible from its resolved config plus a seed.  Values that are not
physical constants of the deployment (corridor spacing, carrier, pathloss
constants, network sizes) are implementation defaults and can be overridden.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import yaml


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``problems`` holds every violated invariant, not just the first one.
    """

    def __init__(self, problems: Union[str, Sequence[str]]):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class EnvConfig:
    n_subnetworks: int = 4
    n_channels: int = 3
    n_subcarriers: int = 1
    area_m: tuple = (259.8, 150.0)
    min_separation_m: float = 1.5
    speed_range_mps: tuple = (2.0, 3.0)
    # straight, left, right
    turn_probs: tuple = (0.5, 0.25, 0.25)
    tti_ms: float = 1.0
    episode_ttis: int = 100
    # aggregate bandwidth of one channel (K subcarriers x W)
    channel_bandwidth_hz: float = 100e3
    noise_dbm: float = -114.0
    tx_power_levels_dbm: tuple = (10.0, 0.0, -114.0)
    tx_gain_dbi: float = 4.0
    rx_gain_dbi: float = 4.0
    rx_noise_figure_db: float = 5.0
    payload_bits: Union[int, tuple] = 34_000
    carrier_hz: float = 6e9
    # None -> derived from Jakes' Doppler at carrier_hz and mean speed
    fading_correlation: Optional[float] = None
    intra_link_distance_m: float = 1.0
    corridor_spacing_m: float = 10.0
    pathloss_intercept_db: float = 32.9
    pathloss_exponent: float = 3.19
    # fixed clutter/penetration loss added to every link
    excess_loss_db: float = 0.0
    fading_enabled: bool = True
    mobility_enabled: bool = True
    initial_positions: Optional[tuple] = None
    terminate_on_delivery: bool = False
    eta_factor: float = 1.25
    # RSSI feature scaling: (rssi_dbm - noise_dbm) / rssi_scale_db
    rssi_scale_db: float = 40.0
    seed: int = 0

    def __post_init__(self):
        self.area_m = tuple(float(v) for v in self.area_m)
        self.speed_range_mps = tuple(float(v) for v in self.speed_range_mps)
        self.turn_probs = tuple(float(v) for v in self.turn_probs)
        self.tx_power_levels_dbm = tuple(float(v) for v in self.tx_power_levels_dbm)
        if isinstance(self.payload_bits, (list, tuple)):
            self.payload_bits = tuple(int(b) for b in self.payload_bits)
        if self.initial_positions is not None:
            self.initial_positions = tuple(tuple(float(c) for c in p) for p in self.initial_positions)
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list:
        out = []
        for name in ("n_subnetworks", "n_channels", "n_subcarriers", "episode_ttis"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if len(self.area_m) != 2 or min(self.area_m) <= 0:
            out.append(f"area_m must be two positive lengths (got {self.area_m})")
        if len(self.speed_range_mps) != 2 or self.speed_range_mps[0] > self.speed_range_mps[1]:
            out.append(f"speed_range_mps must be ordered (got {self.speed_range_mps})")
        elif self.speed_range_mps[0] < 0:
            out.append("speed_range_mps must be non-negative")
        if len(self.turn_probs) != 3 or min(self.turn_probs) < 0 or abs(sum(self.turn_probs) - 1.0) > 1e-9:
            out.append(f"turn_probs must be 3 probabilities summing to 1 (got {self.turn_probs})")
        if self.tti_ms <= 0:
            out.append("tti_ms must be positive")
        if self.channel_bandwidth_hz <= 0:
            out.append("channel_bandwidth_hz must be positive")
        n_off = sum(1 for p in self.tx_power_levels_dbm if p == self.noise_dbm)
        if n_off != 1:
            out.append(
                f"tx_power_levels_dbm must contain exactly one off level equal to noise_dbm "
                f"({self.noise_dbm}); found {n_off}"
            )
        if len(self.tx_power_levels_dbm) < 2:
            out.append("tx_power_levels_dbm needs at least one on level and the off level")
        if isinstance(self.payload_bits, tuple):
            if len(self.payload_bits) != self.n_subnetworks:
                out.append(
                    f"payload_bits has {len(self.payload_bits)} entries for {self.n_subnetworks} subnetworks"
                )
            if any(b <= 0 for b in self.payload_bits):
                out.append("payload_bits entries must be positive")
        elif self.payload_bits <= 0:
            out.append("payload_bits must be positive")
        if self.fading_correlation is not None and not (0.0 <= self.fading_correlation < 1.0):
            out.append(f"fading_correlation must lie in [0, 1) (got {self.fading_correlation})")
        if self.carrier_hz <= 0:
            out.append("carrier_hz must be positive")
        if self.intra_link_distance_m <= 0:
            out.append("intra_link_distance_m must be positive")
        if self.corridor_spacing_m <= 0:
            out.append("corridor_spacing_m must be positive")
        elif self.corridor_spacing_m > min(self.area_m):
            out.append("corridor_spacing_m larger than the deployment area")
        if self.min_separation_m < 0:
            out.append("min_separation_m must be non-negative")
        if self.eta_factor <= 1.0:
            out.append("eta_factor must exceed 1 so the completion reward tops every rate reward")
        if self.initial_positions is not None and len(self.initial_positions) != self.n_subnetworks:
            out.append("initial_positions must list one (x, y) per subnetwork")
        return out

    @property
    def n_power_levels(self) -> int:
        return len(self.tx_power_levels_dbm)

    @property
    def n_actions(self) -> int:
        return self.n_channels * self.n_power_levels

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_channels + self.n_power_levels + 2

    @property
    def tti_s(self) -> float:
        return self.tti_ms * 1e-3

    @property
    def off_level(self) -> int:
        return self.tx_power_levels_dbm.index(self.noise_dbm)

    @property
    def max_level(self) -> int:
        return max(range(self.n_power_levels), key=lambda k: self.tx_power_levels_dbm[k])

    @property
    def payloads(self) -> tuple:
        if isinstance(self.payload_bits, tuple):
            return self.payload_bits
        return (int(self.payload_bits),) * self.n_subnetworks

    @property
    def snapshot_ms(self) -> float:
        return self.episode_ttis * self.tti_ms

    def replace(self, **changes) -> "EnvConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class GANetConfig:
    state_dim: int = 32
    hidden: tuple = (64, 32)
    n_heads: int = 4
    head_dim: int = 8
    history_len: int = 5
    gumbel_temperature: float = 1.0
    # full | no_hard | no_attn
    attention: str = "full"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        problems = []
        if self.attention not in ("full", "no_hard", "no_attn"):
            problems.append(f"attention must be full, no_hard or no_attn (got {self.attention!r})")
        if self.history_len < 1:
            problems.append("history_len must be >= 1")
        if self.gumbel_temperature <= 0:
            problems.append("gumbel_temperature must be positive")
        if self.n_heads < 1 or self.head_dim < 1:
            problems.append("n_heads and head_dim must be >= 1")
        if problems:
            raise ConfigError(problems)


@dataclass
class TrainerConfig:
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    gamma: float = 0.9
    alpha: float = 0.05
    # Polyak weight on the *old* target parameters
    tau: float = 0.995
    batch_size: int = 64
    buffer_capacity: int = 100_000
    episodes: int = 2000
    updates_per_step: int = 1
    # run the update block every `update_interval` env steps
    update_interval: int = 1
    warmup_transitions: int = 1000
    # own | joint | sample
    target_expectation: str = "own"
    # exact | sampled
    pg_estimator: str = "exact"
    bootstrap_on_done: bool = True
    grad_clip: Optional[float] = 10.0
    eval_every: int = 0
    eval_episodes: int = 20
    # ganet | independent_ac | maddpg
    algorithm: str = "ganet"
    ganet: GANetConfig = field(default_factory=GANetConfig)
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.ganet, dict):
            self.ganet = GANetConfig(**self.ganet)
        problems = []
        for name in ("lr_actor", "lr_critic"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                problems.append(f"{name} must lie in (0, 1] (got {v})")
        if not (0.0 <= self.tau <= 1.0):
            problems.append(f"tau must lie in [0, 1] (got {self.tau})")
        if not (0.0 <= self.gamma < 1.0):
            problems.append(f"gamma must lie in [0, 1) (got {self.gamma})")
        if self.alpha < 0:
            problems.append("alpha must be non-negative")
        for name in ("batch_size", "buffer_capacity", "updates_per_step", "update_interval"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.episodes < 0:
            problems.append("episodes must be >= 0")
        if self.warmup_transitions < 0:
            problems.append("warmup_transitions must be >= 0")
        if self.target_expectation not in ("own", "joint", "sample"):
            problems.append(f"target_expectation must be own, joint or sample (got {self.target_expectation!r})")
        if self.pg_estimator not in ("exact", "sampled"):
            problems.append(f"pg_estimator must be exact or sampled (got {self.pg_estimator!r})")
        if self.algorithm not in ("ganet", "independent_ac", "maddpg"):
            problems.append(f"unknown algorithm {self.algorithm!r}")
        if problems:
            raise ConfigError(problems)

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ExperimentSpec:
    scenario: str = "density"
    # density | bandwidth | none
    sweep: str = "none"
    values: tuple = ()
    variants: tuple = ("random", "dga")
    episodes: int = 100
    seeds: tuple = (0,)
    out_dir: str = "runs"

    def __post_init__(self):
        self.values = tuple(self.values)
        self.variants = tuple(self.variants)
        self.seeds = tuple(int(s) for s in self.seeds)
        problems = []
        if self.sweep not in ("density", "bandwidth", "none"):
            problems.append(f"sweep must be density, bandwidth or none (got {self.sweep!r})")
        if self.sweep != "none":
            if not self.values:
                problems.append("sweep values must be nonempty")
            elif list(self.values) != sorted(self.values):
                problems.append(f"sweep values must be sorted (got {list(self.values)})")
        if not self.variants:
            problems.append("at least one policy variant is required")
        if self.episodes < 1:
            problems.append("episodes must be >= 1")
        if not self.seeds:
            problems.append("at least one seed is required")
        if problems:
            raise ConfigError(problems)


# ---------------------------------------------------------------------------
# desk-scale presets

DESK_AREA_M = (24.0, 24.0)
DESK_CORRIDOR_M = 4.0
DESK_EXCESS_LOSS_DB = 76.0


def desk_env(n_subnetworks: int = 4, n_channels: int = 3, **changes) -> EnvConfig:
    """Compact deployment where inter-subnetwork interference actually binds.

    With the full 259.8 m x 150 m floor, a handful of subnetworks and the
    free-space-like intercept, every intra link sits near 99 dB SNR and any
    policy, random included, delivers 34 kb in a few TTIs.  The desk preset
    shrinks the floor and adds a fixed clutter loss so the max-power intra
    SNR is about 23 dB: interference and power choices then decide outage.
    """
    base = dict(
        n_subnetworks=n_subnetworks,
        n_channels=n_channels,
        area_m=DESK_AREA_M,
        corridor_spacing_m=DESK_CORRIDOR_M,
        excess_loss_db=DESK_EXCESS_LOSS_DB,
    )
    base.update(changes)
    return EnvConfig(**base)


# ---------------------------------------------------------------------------
# serialization


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg) -> dict:
    return _plain(cfg)


def fingerprint(cfg: EnvConfig) -> str:
    """Stable digest of everything in an EnvConfig except the seed."""
    d = to_dict(cfg)
    d.pop("seed", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"env": EnvConfig, "trainer": TrainerConfig, "experiment": ExperimentSpec}


def _build(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([f"{section}: unknown field {k!r}" for k in unknown])
    return cls(**data)


def _coerce(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` overrides to a raw nested config dict.

    Keys are dotted paths (``env.n_channels=2``).  A bare key is looked up in
    the env, trainer and experiment sections in that order.
    """
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        value = _coerce(text)
        parts = key.strip().split(".")
        if len(parts) == 1:
            for section, cls in _SECTIONS.items():
                if parts[0] in {f.name for f in fields(cls)}:
                    parts = [section, parts[0]]
                    break
            else:
                raise ConfigError(f"override {key!r} matches no config field")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return raw


def build_configs(raw: dict):
    """Turn a raw nested dict into (EnvConfig, TrainerConfig, ExperimentSpec).

    Every problem in every section is collected before raising.
    """
    problems = []
    unknown = sorted(set(raw) - set(_SECTIONS) - {"preset"})
    problems += [f"unknown section {k!r}" for k in unknown]
    out = {}
    env_raw = dict(raw.get("env") or {})
    preset = raw.get("preset")
    for section, cls in _SECTIONS.items():
        data = dict(raw.get(section) or {})
        try:
            if section == "env" and preset == "desk":
                n = env_raw.pop("n_subnetworks", 4)
                m = env_raw.pop("n_channels", 3)
                _check_unknown(EnvConfig, env_raw, "env")
                out[section] = desk_env(n, m, **env_raw)
            elif section == "env" and preset not in (None, "full"):
                raise ConfigError(f"unknown preset {preset!r}")
            else:
                out[section] = _build(cls, data, section)
        except ConfigError as exc:
            problems += exc.problems
        except TypeError as exc:
            problems.append(f"{section}: {exc}")
    if problems:
        raise ConfigError(problems)
    return out["env"], out["trainer"], out["experiment"]


def _check_unknown(cls, data, section):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([f"{section}: unknown field {k!r}" for k in unknown])


REQUIRED_SECTIONS = ("env",)


def load_config(path: Union[str, Path], overrides: Sequence[str] = ()):
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    missing = [s for s in REQUIRED_SECTIONS if s not in raw]
    if missing:
        raise ConfigError([f"missing required field {s!r}" for s in missing])
    raw = apply_overrides(raw, overrides)
    return build_configs(raw), raw


def config_from_dict(d: dict, cls):
    if cls is TrainerConfig and "ganet" in d:
        d = dict(d, ganet=GANetConfig(**d["ganet"]))
    return cls(**d)
