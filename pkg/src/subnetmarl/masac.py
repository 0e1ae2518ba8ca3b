"""Multi-agent soft actor-critic with centralized critics.

Training follows the usual off-policy loop: act with the current stochastic
policies, store joint transitions, then per update regress every critic on
soft targets built from target networks and take one policy-gradient step per
agent with a counterfactual baseline.  Execution loads the target actors and
acts greedily on local observations only.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import ganet
from .config import ConfigError, EnvConfig, TrainerConfig, fingerprint
from .env import SubnetworkEnv, observation_vector

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# replay


@dataclass
class Batch:
    hist: torch.Tensor  # (B, N, K, obs)
    actions: torch.Tensor  # (B, N) long
    rewards: torch.Tensor  # (B, N)
    next_hist: torch.Tensor  # (B, N, K, obs)
    done: torch.Tensor  # (B,)
    index: Optional[np.ndarray] = None

    @property
    def obs(self):
        return self.hist[..., -1, :]

    @property
    def next_obs(self):
        return self.next_hist[..., -1, :]


class ReplayBuffer:
    """Ring buffer of joint transitions with per-agent observation histories.

    Only the history window of s and the new observation are stored; the
    window of s' is the shifted window of s, since transitions never cross
    an episode boundary.
    """

    def __init__(self, capacity, n_agents, history_len, obs_dim):
        self.capacity = int(capacity)
        self.hist = np.zeros((capacity, n_agents, history_len, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, n_agents, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros((capacity, n_agents), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, hist, actions, rewards, next_obs, done):
        c = self.cursor
        self.hist[c] = hist
        self.actions[c] = actions
        self.rewards[c] = rewards
        self.next_obs[c] = next_obs
        self.done[c] = float(done)
        self.cursor = (c + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng):
        return rng.choice(self.size, size=min(batch_size, self.size), replace=False)

    def sample(self, batch_size, rng) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        hist = torch.from_numpy(self.hist[idx])
        nxt = torch.from_numpy(self.next_obs[idx])
        next_hist = torch.cat([hist[:, :, 1:], nxt[:, :, None]], dim=2)
        return Batch(
            hist=hist,
            actions=torch.from_numpy(self.actions[idx]),
            rewards=torch.from_numpy(self.rewards[idx]),
            next_hist=next_hist,
            done=torch.from_numpy(self.done[idx]),
            index=idx,
        )


class History:
    """Rolling per-agent window of the last K observation vectors, padded with the first."""

    def __init__(self, first_obs, k):
        self.window = np.repeat(np.asarray(first_obs, dtype=np.float32)[:, None, :], k, axis=1)

    def push(self, obs):
        self.window = np.concatenate([self.window[:, 1:], np.asarray(obs, dtype=np.float32)[:, None, :]], axis=1)
        return self.window


# ---------------------------------------------------------------------------
# losses


def sample_actions(probs, generator=None):
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])


def counterfactual_baseline(q_all, probs):
    """b_i = sum_a pi_i(a | o_i) Q_i(s, (a, a_-i)); inputs (..., A)."""
    return (probs * q_all).sum(-1)


def advantage(q_all, probs, actions):
    q = q_all.gather(-1, actions.long()[..., None]).squeeze(-1)
    return q - counterfactual_baseline(q_all, probs)


def joint_actions(n_agents, n_actions):
    return torch.tensor(list(itertools.product(range(n_actions), repeat=n_agents)), dtype=torch.long)


def critic_targets(batch: Batch, target_critic, target_actors, alpha, gamma,
                   mode="own", bootstrap_on_done=True, generator=None):
    """Soft targets y_i = r_i + gamma E_{a'~pi_bar}[Q_bar_i(s', a') - alpha log pi_bar_i(a'_i | s'_i)].

    ``mode``: ``own`` enumerates agent i's next action exactly and samples the
    others once; ``joint`` enumerates the whole joint action space (small
    problems only); ``sample`` uses a single joint sample.
    """
    with torch.no_grad():
        logp = target_actors(batch.next_obs)
        probs = logp.exp()
        b, n, a = probs.shape
        if mode == "joint":
            joint = joint_actions(n, a)
            if len(joint) > 4096:
                raise ConfigError(f"joint expectation over {len(joint)} actions is too large")
            v = torch.zeros(b, n)
            for row in joint:
                acts = row.expand(b, n)
                q = target_critic(batch.next_hist, acts, generator=generator)
                lp = logp.gather(-1, acts[..., None]).squeeze(-1)
                weight = lp.sum(-1, keepdim=True).exp()
                v = v + weight * (q - alpha * lp)
        else:
            acts = sample_actions(probs, generator)
            if mode == "own":
                q_all = target_critic.q_all(batch.next_hist, acts, generator=generator)
                v = (probs * (q_all - alpha * logp)).sum(-1)
            elif mode == "sample":
                q = target_critic(batch.next_hist, acts, generator=generator)
                v = q - alpha * logp.gather(-1, acts[..., None]).squeeze(-1)
            else:
                raise ConfigError(f"unknown target expectation {mode!r}")
        cont = torch.ones_like(batch.done) if bootstrap_on_done else 1.0 - batch.done
        return batch.rewards + gamma * cont[:, None] * v


def joint_regression_loss(q, y):
    """sum_i mean_batch (Q_i - y_i)^2."""
    return ((q - y.detach()) ** 2).mean(0).sum()


def critic_loss(batch: Batch, critic, y, generator=None):
    return joint_regression_loss(critic(batch.hist, batch.actions, generator=generator), y)


def policy_objective(logits, q_all, actions, alpha, estimator="exact", baseline=None):
    """Per-agent surrogate whose gradient is the soft policy gradient.

    ``exact`` sums over the agent's own actions (the expectation of the
    sampled estimator); ``sampled`` is the score-function form at the given
    actions.  Q and the baseline are constants; ``baseline`` defaults to the
    counterfactual one at the current logits.  Returns (B, N).
    """
    logp = F.log_softmax(logits, dim=-1)
    q_all = q_all.detach()
    probs = logp.exp()
    b = counterfactual_baseline(q_all, probs) if baseline is None else baseline
    b = b.detach()
    if estimator == "exact":
        return (probs * (q_all - alpha * logp)).sum(-1) - b
    lp = logp.gather(-1, actions.long()[..., None]).squeeze(-1)
    q = q_all.gather(-1, actions.long()[..., None]).squeeze(-1)
    weight = (q - b - alpha * lp).detach()
    return lp * weight


def entropy(logits):
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


def soft_update(target, online, tau):
    """theta_bar <- tau * theta_bar + (1 - tau) * theta, in place."""
    tp = list(target.parameters())
    op = list(online.parameters())
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ConfigError("target and online networks have different parameter shapes")
    with torch.no_grad():
        for t, o in zip(tp, op):
            t.mul_(tau).add_(o, alpha=1.0 - tau)
    return target


def hard_update(target, online):
    target.load_state_dict(online.state_dict())
    return target


def param_digest(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# agent


def build_critic(algorithm, n_agents, obs_dim, n_actions, tcfg: TrainerConfig):
    hidden = tcfg.ganet.hidden
    if algorithm == "ganet":
        return ganet.GANetCritic(n_agents, obs_dim, n_actions, tcfg.ganet)
    if algorithm == "independent_ac":
        return ganet.IndependentCritic(n_agents, obs_dim, n_actions, hidden)
    if algorithm == "maddpg":
        return ganet.CentralCritic(n_agents, obs_dim, n_actions, hidden)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


class MASAC:
    """Actors, critic, their targets and optimizers, plus one update step."""

    def __init__(self, n_agents, obs_dim, n_actions, tcfg: TrainerConfig):
        import copy

        self.tcfg = tcfg
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        hidden = tcfg.ganet.hidden
        self.actors = ganet.Actors(n_agents, obs_dim, n_actions, hidden)
        self.critic = build_critic(tcfg.algorithm, n_agents, obs_dim, n_actions, tcfg)
        self.target_actors = copy.deepcopy(self.actors)
        self.target_critic = copy.deepcopy(self.critic)
        for p in itertools.chain(self.target_actors.parameters(), self.target_critic.parameters()):
            p.requires_grad_(False)
        self.actor_opt = torch.optim.Adam(self.actors.parameters(), lr=tcfg.lr_actor)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=tcfg.lr_critic)

    def update(self, batch: Batch, generator=None) -> dict:
        t = self.tcfg
        maddpg = t.algorithm == "maddpg"
        alpha = 0.0 if maddpg else t.alpha
        mode = "sample" if maddpg else t.target_expectation

        y = critic_targets(batch, self.target_critic, self.target_actors, alpha, t.gamma,
                           mode=mode, bootstrap_on_done=t.bootstrap_on_done, generator=generator)
        q_loss = critic_loss(batch, self.critic, y, generator=generator)
        self.critic_opt.zero_grad()
        q_loss.backward()
        if t.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.critic.parameters(), t.grad_clip)
        self.critic_opt.step()

        logits = self.actors.logits(batch.obs)
        if maddpg:
            pi_loss = self._maddpg_actor_loss(batch, logits, generator)
        else:
            with torch.no_grad():
                # joint actions for the gradient come from the current policies, not the buffer
                acts = sample_actions(F.softmax(logits, -1), generator)
                q_all = self.critic.q_all(batch.hist, acts, generator=generator)
            obj = policy_objective(logits, q_all, acts, t.alpha, t.pg_estimator)
            pi_loss = -obj.mean(0).sum()
        self.actor_opt.zero_grad()
        pi_loss.backward()
        if t.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.actors.parameters(), t.grad_clip)
        self.actor_opt.step()

        soft_update(self.target_critic, self.critic, t.tau)
        soft_update(self.target_actors, self.actors, t.tau)
        return {
            "critic_loss": q_loss.item(),
            "actor_loss": pi_loss.item(),
            "entropy": entropy(logits.detach()).mean().item(),
        }

    def _maddpg_actor_loss(self, batch, logits, generator):
        b, n, a = logits.shape
        with torch.no_grad():
            others = F.one_hot(sample_actions(F.softmax(logits, -1), generator), a).float()
        relaxed = ganet.gumbel_softmax(logits, 1.0, hard=True, generator=generator)
        joint = others[:, None].expand(b, n, n, a).clone()
        idx = torch.arange(n)
        joint[:, idx, idx] = relaxed
        q = self.critic.q_relaxed(batch.obs, joint)
        return -q.mean(0).sum() + 1e-3 * (logits ** 2).mean()


# ---------------------------------------------------------------------------
# policies used for rollouts


class ActorPolicy:
    """Wraps trained actors behind the common policy interface."""

    def __init__(self, actors, greedy=True, generator=None):
        self.actors = actors
        self.greedy = greedy
        self.generator = generator

    def act(self, observations, obs_array):
        return self.actors.act(obs_array, greedy=self.greedy, generator=self.generator).numpy()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    agent: MASAC
    metrics: list
    buffer: ReplayBuffer
    checkpoint: Optional[Path] = None
    checkpoints: list = field(default_factory=list)


def configure_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def train(cfg: EnvConfig, tcfg: TrainerConfig, seed: Optional[int] = None, out_dir=None,
          metrics_path=None, progress: Optional[Callable] = None) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    configure_determinism(seed, tcfg.deterministic)
    rng = np.random.default_rng(seed + 7919)
    gen = torch.Generator().manual_seed(seed + 104729)
    env = SubnetworkEnv(cfg, seed=seed)
    n, a, d = cfg.n_subnetworks, cfg.n_actions, cfg.obs_dim
    agent = MASAC(n, d, a, tcfg)
    k = tcfg.ganet.history_len
    buffer = ReplayBuffer(min(tcfg.buffer_capacity, max(1, tcfg.episodes * cfg.episode_ttis)), n, k, d)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    fp = fingerprint(cfg)
    metrics = []
    checkpoints = []
    step = 0
    mfh = open(metrics_path, "a") if metrics_path else None
    try:
        for ep in range(tcfg.episodes):
            env.reset()
            obs = env.observation_array()
            hist = History(obs, k)
            returns = np.zeros(n)
            stats = {"critic_loss": [], "actor_loss": [], "entropy": []}
            done = False
            while not done:
                acts = agent.actors.act(obs, greedy=False, generator=gen).numpy()
                res = env.step(acts)
                next_obs = np.stack([observation_vector(o, cfg) for o in res.observations])
                buffer.add(hist.window, acts, res.rewards, next_obs, res.done)
                hist.push(next_obs)
                obs = next_obs
                returns += res.rewards
                done = res.done
                step += 1
                ready = len(buffer) >= max(tcfg.warmup_transitions, tcfg.batch_size)
                if ready and step % tcfg.update_interval == 0:
                    for _ in range(tcfg.updates_per_step):
                        out = agent.update(buffer.sample(tcfg.batch_size, rng), generator=gen)
                        if not all(math.isfinite(v) for v in out.values()):
                            snap = {"episode": ep, "step": step, **out}
                            if out_dir:
                                (out_dir / "abort_snapshot.json").write_text(json.dumps(snap, indent=2))
                            raise TrainingAborted(f"non-finite loss at episode {ep}, step {step}: {out}", snap)
                        for key, v in out.items():
                            stats[key].append(v)
            row = {
                "episode": ep,
                "mean_reward": float(returns.mean()),
                "agent_reward": [float(r) for r in returns],
                "outage": [float(o) for o in env.outage()],
                "critic_loss": _mean(stats["critic_loss"]),
                "actor_loss": _mean(stats["actor_loss"]),
                "entropy": _mean(stats["entropy"]),
            }
            metrics.append(row)
            if mfh:
                mfh.write(json.dumps(row) + "\n")
                mfh.flush()
            if progress:
                progress(row)
            if tcfg.eval_every and out_dir and (ep + 1) % tcfg.eval_every == 0:
                path = out_dir / f"checkpoint_ep{ep + 1}.pt"
                ev = execute(agent.target_actors, cfg, tcfg.eval_episodes, seed=seed + 1_000_003)
                ganet.save_checkpoint(path, agent.target_actors, fp, extra={"episode": ep + 1, "eval_outage": ev.outage})
                checkpoints.append(path)
    finally:
        if mfh:
            mfh.close()
    ckpt = None
    if out_dir:
        ckpt = out_dir / "checkpoint.pt"
        ganet.save_checkpoint(ckpt, agent.target_actors, fp, critic=agent.critic,
                              extra={"episodes": tcfg.episodes, "algorithm": tcfg.algorithm,
                                     "attention": tcfg.ganet.attention})
        actor_only = out_dir / "actor.pt"
        ganet.save_checkpoint(actor_only, agent.target_actors, fp)
    return TrainResult(agent, metrics, buffer, ckpt, checkpoints)


# ---------------------------------------------------------------------------
# execution


@dataclass
class ExecResult:
    failures: np.ndarray  # (episodes, N) 1 where the payload was not delivered
    rewards: np.ndarray  # (episodes, N) episode returns
    trace: list
    remaining: list  # per episode (T+1, N) remaining payload timeline

    @property
    def outage(self) -> float:
        return float(self.failures.mean()) if self.failures.size else float("nan")

    @property
    def per_agent_outage(self) -> np.ndarray:
        return self.failures.mean(0)

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean()) if self.rewards.size else float("nan")


def rollout(policy, cfg: EnvConfig, episodes: int, seed: int = 0, record_trace=False) -> ExecResult:
    """Run ``episodes`` decentralized episodes of ``policy`` in a fresh environment."""
    env = SubnetworkEnv(cfg, seed=seed, record_trace=record_trace)
    fails, rets, trace, timelines = [], [], [], []
    for ep in range(episodes):
        observations = env.reset()
        obs = env.observation_array()
        ret = np.zeros(cfg.n_subnetworks)
        timeline = [env.world.remaining.copy()]
        done = False
        while not done:
            acts = policy.act(observations, obs)
            res = env.step(list(acts))
            observations = res.observations
            obs = np.stack([observation_vector(o, cfg) for o in observations])
            ret += res.rewards
            timeline.append(env.world.remaining.copy())
            done = res.done
        fails.append(env.outage())
        rets.append(ret)
        timelines.append(np.array(timeline))
        if record_trace:
            trace.extend({"episode": ep, **row} for row in env.trace)
    return ExecResult(np.array(fails).reshape(episodes, -1), np.array(rets).reshape(episodes, -1), trace, timelines)


def execute(checkpoint, cfg: EnvConfig, episodes: int, seed: int = 0, record_trace=False) -> ExecResult:
    """Greedy decentralized execution from target-actor parameters.

    ``checkpoint`` is a path (fingerprint-checked against ``cfg``) or an
    ``Actors`` module.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(checkpoint, (str, Path)):
        actors, _ = ganet.load_actors(checkpoint, fingerprint(cfg))
    else:
        actors = checkpoint
    was_training = actors.training
    actors.eval()
    try:
        return rollout(ActorPolicy(actors, greedy=True), cfg, episodes, seed, record_trace)
    finally:
        actors.train(was_training)
