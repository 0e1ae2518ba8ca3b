"""Experiment matrix: density and bandwidth sweeps, the heterogeneous-QoS
scenario, outage records and their persistence.

Records are JSON lines tagged with a schema version.  Directory layout for a
sweep is ``<root>/<experiment>/<variant>/<seed>/`` with the per-point records
there and the concatenated set in ``<root>/<experiment>/records.jsonl``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np
from scipy.stats import binomtest

from . import baselines, ganet, masac
from .config import ConfigError, EnvConfig, ExperimentSpec, TrainerConfig, desk_env, fingerprint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
QOS_PAYLOADS = (17_000, 34_000, 34_000, 51_000)
FULL_SCALE_DENSITIES = tuple(range(4, 21, 2))
FULL_SCALE_BANDWIDTHS_HZ = (50e3, 100e3, 200e3, 500e3)


def binomial_ci(failures: int, trials: int, level: float = 0.95):
    """Clopper-Pearson interval for a failure proportion."""
    if trials <= 0:
        return (float("nan"), float("nan"))
    ci = binomtest(int(failures), int(trials)).proportion_ci(confidence_level=level, method="exact")
    return (float(ci.low), float(ci.high))


@dataclass
class OutageRecord:
    variant: str
    sweep: str
    value: float
    seed: int
    outage: float
    ci_low: float
    ci_high: float
    mean_reward: float
    episodes: int
    agents: int
    failures: int
    per_agent_outage: list = field(default_factory=list)
    status: str = "ok"
    note: str = ""
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.status == "ok" and not (0.0 <= self.outage <= 1.0):
            raise ValueError(f"outage must lie in [0, 1], got {self.outage}")

    @classmethod
    def from_result(cls, variant, sweep, value, seed, res: masac.ExecResult) -> "OutageRecord":
        fails = int(res.failures.sum())
        trials = int(res.failures.size)
        lo, hi = binomial_ci(fails, trials)
        return cls(
            variant=variant,
            sweep=sweep,
            value=float(value),
            seed=int(seed),
            outage=fails / trials,
            ci_low=lo,
            ci_high=hi,
            mean_reward=res.mean_reward,
            episodes=int(res.failures.shape[0]),
            agents=int(res.failures.shape[1]),
            failures=fails,
            per_agent_outage=[float(v) for v in res.per_agent_outage],
        )

    @classmethod
    def skipped(cls, variant, sweep, value, seed, note) -> "OutageRecord":
        nan = float("nan")
        return cls(variant, sweep, float(value), int(seed), nan, nan, nan, nan, 0, 0, 0, [], "skipped", note)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "OutageRecord":
        d = json.loads(line)
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {d.get('schema')}")
        return cls(**d)


def write_records(records: Iterable[OutageRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def read_records(path) -> List[OutageRecord]:
    with open(path) as fh:
        return [OutageRecord.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# evaluation of one variant at one point


def evaluate_variant(kind: str, cfg: EnvConfig, episodes: int, seed: int = 0,
                     checkpoint=None, record_trace=False) -> masac.ExecResult:
    """Roll out a variant greedily; trained variants need ``checkpoint`` (path or Actors).

    Parameters of a trained policy are hashed before and after the rollout and
    must not change.
    """
    variant = baselines.PolicyVariant(kind)
    if not variant.trained:
        policy = baselines.training_free_policy(kind, cfg, seed=seed + 1)
        return masac.rollout(policy, cfg, episodes, seed=seed, record_trace=record_trace)
    if checkpoint is None:
        raise FileNotFoundError(f"no checkpoint for trained variant {kind!r}")
    if isinstance(checkpoint, (str, Path)):
        actors, _ = ganet.load_actors(checkpoint, fingerprint(cfg))
    else:
        actors = checkpoint
    before = masac.param_digest(actors)
    res = masac.execute(actors, cfg, episodes, seed=seed, record_trace=record_trace)
    if masac.param_digest(actors) != before:
        raise RuntimeError("policy parameters changed during evaluation")
    return res


def point_config(base: EnvConfig, sweep: str, value) -> EnvConfig:
    if sweep == "density":
        n = int(value)
        payload = base.payload_bits
        if isinstance(payload, tuple):
            payload = payload[0]
        return base.replace(n_subnetworks=n, payload_bits=payload, initial_positions=None)
    if sweep == "bandwidth":
        return base.replace(channel_bandwidth_hz=float(value))
    if sweep == "none":
        return base
    raise ConfigError(f"unknown sweep {sweep!r}")


def checkpoint_path(root, experiment, variant, seed, value) -> Path:
    return Path(root) / experiment / variant / str(seed) / f"point_{value:g}" / "actor.pt"


def run_sweep(spec: ExperimentSpec, base: EnvConfig, trainer: Optional[TrainerConfig] = None,
              root=None, checkpoints: Optional[Dict] = None,
              progress: Optional[Callable] = None) -> List[OutageRecord]:
    """Evaluate every (variant, value, seed) point of ``spec``.

    A trained variant uses ``checkpoints[(variant, value, seed)]`` when given,
    else the conventional checkpoint path under ``root``; when neither exists
    and ``trainer`` is set it is trained in place, otherwise a skipped record
    is emitted with a warning.
    """
    root = Path(root if root is not None else spec.out_dir)
    values = spec.values if spec.sweep != "none" else (0,)
    checkpoints = checkpoints or {}
    records = []
    for kind in spec.variants:
        baselines.PolicyVariant(kind)
        for seed in spec.seeds:
            point_records = []
            for value in values:
                cfg = point_config(base, spec.sweep, value) if spec.sweep != "none" else base
                ckpt = None
                if kind in baselines.TRAINED:
                    ckpt = checkpoints.get((kind, value, seed))
                    path = checkpoint_path(root, spec.scenario, kind, seed, value)
                    if ckpt is None and path.exists():
                        ckpt = path
                    if ckpt is None and trainer is not None:
                        tc = baselines.trainer_config_for(kind, trainer)
                        masac.train(cfg, tc, seed=seed, out_dir=path.parent,
                                    metrics_path=path.parent / "metrics.jsonl")
                        ckpt = path
                    if ckpt is None:
                        msg = f"missing checkpoint for {kind} at {spec.sweep}={value} seed {seed}; skipped"
                        warnings.warn(msg)
                        point_records.append(OutageRecord.skipped(kind, spec.sweep, value, seed, msg))
                        continue
                res = evaluate_variant(kind, cfg, spec.episodes, seed=seed, checkpoint=ckpt)
                rec = OutageRecord.from_result(kind, spec.sweep, value, seed, res)
                point_records.append(rec)
                if progress:
                    progress(rec)
            write_records(point_records, root / spec.scenario / kind / str(seed) / "records.jsonl")
            records.extend(point_records)
    write_records(records, root / spec.scenario / "records.jsonl")
    return records


def run_density_sweep(spec: ExperimentSpec, base: Optional[EnvConfig] = None, **kw) -> List[OutageRecord]:
    """Outage vs number of subnetworks at the base bandwidth (100 kHz by default)."""
    if spec.sweep != "density":
        raise ConfigError("run_density_sweep needs sweep='density'")
    return run_sweep(spec, base or desk_env(), **kw)


def run_bandwidth_sweep(spec: ExperimentSpec, base: Optional[EnvConfig] = None, **kw) -> List[OutageRecord]:
    """Outage vs per-channel bandwidth (values in Hz) at a fixed deployment."""
    if spec.sweep != "bandwidth":
        raise ConfigError("run_bandwidth_sweep needs sweep='bandwidth'")
    return run_sweep(spec, base or desk_env(), **kw)


# ---------------------------------------------------------------------------
# heterogeneous QoS


def qos_env(**changes) -> EnvConfig:
    return desk_env(4, 3, payload_bits=QOS_PAYLOADS, **changes)


@dataclass
class QoSResult:
    success: np.ndarray  # (N,) per-agent delivery rate within the budget
    timeline: np.ndarray  # (T+1, N) remaining payload of the first episode
    trace: list
    result: masac.ExecResult

    @property
    def succeeded(self) -> bool:
        return bool(np.all(self.success > 0))


def run_qos_scenario(policy, cfg: Optional[EnvConfig] = None, episodes: int = 200, seed: int = 0) -> QoSResult:
    """Per-agent delivery success and the remaining-payload timeline.

    ``policy`` is a variant name for training-free kinds, an ``Actors`` module,
    a checkpoint path, or any object with ``act``.
    """
    cfg = cfg or qos_env()
    if isinstance(policy, str) and policy in baselines.TRAINING_FREE:
        res = evaluate_variant(policy, cfg, episodes, seed=seed, record_trace=True)
    elif isinstance(policy, (str, Path, ganet.Actors)):
        res = evaluate_variant("ganet_full", cfg, episodes, seed=seed, checkpoint=policy, record_trace=True)
    else:
        res = masac.rollout(policy, cfg, episodes, seed=seed, record_trace=True)
    first = [row for row in res.trace if row["episode"] == 0]
    return QoSResult(1.0 - res.per_agent_outage, res.remaining[0], first, res)
