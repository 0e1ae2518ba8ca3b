"""GA-Net: hard + multi-head soft attention critic and decentralized actors.

Shapes used throughout: B batch, N agents, K history length, A actions,
L attention heads.  All agents share the observation encoder, history GRU,
hard-attention BiGRU and the Q/K/V projections; the critic heads and the
actors have per-agent parameters.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GANetConfig

CHECKPOINT_FORMAT = "subnetmarl-checkpoint"
CHECKPOINT_VERSION = 1


def sample_gumbel(shape, generator=None, eps=1e-20, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + eps) + eps)


def gumbel_softmax(logits, temperature=1.0, hard=True, generator=None, noise=None):
    """Gumbel-softmax sample over the last axis.

    With ``hard`` the forward value is the exact one-hot of the argmax and the
    backward pass goes through the relaxed sample (straight-through).
    """
    if noise is None:
        noise = sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype)
    y = F.softmax((logits + noise) / temperature, dim=-1)
    if not hard:
        return y
    index = y.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
    return (y_hard - y).detach() + y


def one_hot(actions, n_actions):
    return F.one_hot(actions.long(), n_actions).to(torch.float32)


class AgentLinear(nn.Module):
    """One independent linear map per agent, applied over an agent axis.

    Input ``(..., N, in)`` -> output ``(..., N, out)``.
    """

    def __init__(self, n_agents, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_agents, in_features, out_features))
        self.bias = nn.Parameter(torch.empty(n_agents, out_features))
        bound = 1.0 / math.sqrt(in_features)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return torch.einsum("...ni,nio->...no", x, self.weight) + self.bias


class AgentMLP(nn.Module):
    def __init__(self, n_agents, in_features, hidden, out_features):
        super().__init__()
        dims = [in_features, *hidden, out_features]
        self.layers = nn.ModuleList(AgentLinear(n_agents, a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.relu(x)
        return x


# ---------------------------------------------------------------------------
# actors


class Actors(nn.Module):
    """Decentralized policies: agent i's logits depend on its own observation only."""

    def __init__(self, n_agents, obs_dim, n_actions, hidden=(64, 32)):
        super().__init__()
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        self.hidden = tuple(hidden)
        self.net = AgentMLP(n_agents, obs_dim, hidden, n_actions)

    def logits(self, obs):
        return self.net(obs)

    def forward(self, obs):
        return F.log_softmax(self.logits(obs), dim=-1)

    def distribution(self, obs):
        return torch.distributions.Categorical(logits=self.logits(obs))

    def probs(self, obs):
        return F.softmax(self.logits(obs), dim=-1)

    @torch.no_grad()
    def act(self, obs, greedy=False, generator=None):
        logp = self.forward(torch.as_tensor(obs, dtype=torch.float32))
        if greedy:
            return logp.argmax(-1)
        flat = logp.reshape(-1, logp.shape[-1]).exp()
        return torch.multinomial(flat, 1, generator=generator).reshape(logp.shape[:-1])

    def spec(self):
        return dict(n_agents=self.n_agents, obs_dim=self.obs_dim, n_actions=self.n_actions, hidden=list(self.hidden))


# ---------------------------------------------------------------------------
# GA-Net critic


class HardAttention(nn.Module):
    """BiGRU over (e_i, e_j) pairs, j != i in index order, then 2-way Gumbel gate."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or dim
        self.bigru = nn.GRU(2 * dim, hidden, batch_first=True, bidirectional=True)
        self.fc = nn.Linear(2 * hidden, 2)

    def logits(self, e):
        """(B, N, D) -> (B, N, N-1, 2) edge logits, neighbours in index order."""
        b, n, d = e.shape
        idx = others_index(n, e.device)
        ei = e[:, :, None, :].expand(b, n, n - 1, d)
        ej = e[:, idx, :]
        seq = torch.cat([ei, ej], dim=-1).reshape(b * n, n - 1, 2 * d)
        out, _ = self.bigru(seq)
        return self.fc(out).reshape(b, n, n - 1, 2)

    def forward(self, e, temperature=1.0, stochastic=True, generator=None):
        b, n, _ = e.shape
        if n < 2:
            return e.new_zeros(b, n, n)
        lg = self.logits(e)
        if stochastic:
            gate = gumbel_softmax(lg, temperature, hard=True, generator=generator)[..., 1]
        else:
            gate = (lg[..., 1] > lg[..., 0]).to(e.dtype)
        return scatter_offdiag(gate, n)


def others_index(n, device=None):
    """(N, N-1) index of the other agents for each agent, in increasing order."""
    full = torch.arange(n, device=device).expand(n, n)
    keep = ~torch.eye(n, dtype=torch.bool, device=device)
    return full[keep].reshape(n, n - 1)


def scatter_offdiag(values, n):
    """(B, N, N-1) -> (B, N, N) with a zero diagonal."""
    b = values.shape[0]
    out = values.new_zeros(b, n, n)
    idx = others_index(n, values.device).expand(b, n, n - 1)
    return out.scatter(-1, idx, values)


def masked_attention_weights(logits, mask):
    """Softmax over the columns where ``mask`` is 1.

    ``mask`` carries forward values that are exactly 0 or 1 (straight-through
    gates); masked columns get exactly zero weight and rows with no open
    column are all-zero.  The gate values multiply the exponentials, so
    gradients still reach open and closed gates.
    """
    open_ = mask > 0.5
    filled = logits.masked_fill(~open_, float("-inf"))
    top = filled.max(dim=-1, keepdim=True).values
    top = torch.where(torch.isfinite(top), top, torch.zeros_like(top)).detach()
    z = logits - top
    z = torch.where(open_, z, z.clamp(max=0.0))
    num = mask * torch.exp(z)
    den = num.sum(dim=-1, keepdim=True)
    return num / torch.where(den > 0, den, torch.ones_like(den))


class SoftAttention(nn.Module):
    """Multi-head scaled dot-product attention over the hard-attention subgraph."""

    def __init__(self, query_dim, kv_dim, n_heads=4, head_dim=8):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, head_dim
        self.q = nn.Linear(query_dim, n_heads * head_dim, bias=False)
        self.k = nn.Linear(kv_dim, n_heads * head_dim, bias=False)
        self.v = nn.Linear(kv_dim, n_heads * head_dim, bias=False)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def scores(self, queries, keys):
        q = self._split(self.q(queries))
        k = self._split(self.k(keys))
        # dot product scaled by d_k
        return q @ k.transpose(-1, -2) / self.head_dim

    def values(self, keys):
        return self._split(self.v(keys))

    def forward(self, queries, keys, mask):
        """Returns (weights (B, L, N, N), aggregates (B, L, N, head_dim))."""
        w = masked_attention_weights(self.scores(queries, keys), mask[:, None, :, :])
        return w, w @ self.values(keys)


def aggregate_heads(per_head, nonlinearity=F.leaky_relu):
    """(B, L, N, d) -> (B, N, L*d): nonlinearity per head, heads concatenated."""
    b, l, n, d = per_head.shape
    return nonlinearity(per_head).transpose(1, 2).reshape(b, n, l * d)


class GANetCritic(nn.Module):
    """Centralized per-agent critics Q_i(s, a) = h_i(f_i(s_i, a_i), h_hat_i)."""

    def __init__(self, n_agents, obs_dim, n_actions, cfg: Optional[GANetConfig] = None):
        super().__init__()
        cfg = cfg or GANetConfig()
        self.cfg = cfg
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        d = cfg.state_dim
        h1, h2 = cfg.hidden
        self.encoder = nn.Sequential(nn.Linear(obs_dim, h1), nn.ReLU(), nn.Linear(h1, d), nn.LeakyReLU())
        self.history = nn.GRU(d, d, batch_first=True)
        self.hard = HardAttention(d)
        self.neighbour = nn.Linear(d + n_actions, d)
        self.attention = SoftAttention(d, d, cfg.n_heads, cfg.head_dim)
        ctx = cfg.n_heads * cfg.head_dim
        self.f = AgentLinear(n_agents, d + n_actions, h1)
        self.h = AgentMLP(n_agents, h1 + ctx, (h2,), 1)

    @property
    def context_dim(self):
        return self.cfg.n_heads * self.cfg.head_dim

    # -- encoders -------------------------------------------------------

    def encode_observation(self, obs):
        return self.encoder(obs)

    def fuse_history(self, codes):
        """(..., K, D) state codes, oldest first -> (..., D) final GRU state."""
        lead = codes.shape[:-2]
        k, d = codes.shape[-2:]
        _, h = self.history(codes.reshape(-1, k, d))
        return h[-1].reshape(*lead, d)

    def encode(self, hist):
        """(B, N, K, obs) -> s (B, N, D) current codes, e (B, N, D) history codes."""
        codes = self.encode_observation(hist)
        return codes[..., -1, :], self.fuse_history(codes)

    # -- attention ------------------------------------------------------

    def hard_mask(self, e, stochastic=True, generator=None):
        b, n, _ = e.shape
        if self.cfg.attention != "full" or n < 2:
            return 1.0 - torch.eye(n).expand(b, n, n)
        return self.hard(e, self.cfg.gumbel_temperature, stochastic=stochastic, generator=generator)

    def context(self, e, actions_1h, mask, return_weights=False):
        """Joint state embedding h_hat (B, N, L*d) from others' (e_j, a_j)."""
        b, n, _ = e.shape
        kv = F.leaky_relu(self.neighbour(torch.cat([e, actions_1h], dim=-1)))
        if self.cfg.attention == "no_attn":
            vals = self.attention.values(kv)
            w = mask / mask.sum(-1, keepdim=True).clamp(min=1.0)
            w = w[:, None].expand(b, self.cfg.n_heads, n, n)
            agg = w @ vals
        else:
            w, agg = self.attention(e, kv, mask)
        out = aggregate_heads(agg)
        return (out, w) if return_weights else out

    # -- Q values -------------------------------------------------------

    def q_all(self, hist, actions, stochastic=True, generator=None, return_parts=False):
        """Q_i for every own action a_i with the others' actions held fixed.

        hist (B, N, K, obs), actions (B, N) long -> (B, N, A).
        """
        s, e = self.encode(hist)
        mask = self.hard_mask(e, stochastic=stochastic, generator=generator)
        a1h = one_hot(actions, self.n_actions)
        ctx = self.context(e, a1h, mask)
        b, n, _ = s.shape
        eye = torch.eye(self.n_actions)
        # (B, A, N, D + A)
        own = torch.cat([s[:, None].expand(b, self.n_actions, n, s.shape[-1]),
                         eye[None, :, None, :].expand(b, self.n_actions, n, self.n_actions)], dim=-1)
        f = F.relu(self.f(own))
        z = torch.cat([f, ctx[:, None].expand(b, self.n_actions, n, ctx.shape[-1])], dim=-1)
        q = self.h(z).squeeze(-1).transpose(1, 2)
        if return_parts:
            return q, dict(s=s, e=e, mask=mask, context=ctx)
        return q

    def forward(self, hist, actions, stochastic=True, generator=None):
        q = self.q_all(hist, actions, stochastic=stochastic, generator=generator)
        return q.gather(-1, actions.long()[..., None]).squeeze(-1)


class IndependentCritic(nn.Module):
    """Per-agent critic that sees only its own observation and action."""

    def __init__(self, n_agents, obs_dim, n_actions, hidden=(64, 32)):
        super().__init__()
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        self.net = AgentMLP(n_agents, obs_dim, hidden, n_actions)
        self.input_dim = obs_dim

    def q_all(self, hist, actions, stochastic=True, generator=None):
        return self.net(hist[..., -1, :])

    def forward(self, hist, actions, stochastic=True, generator=None):
        q = self.q_all(hist, actions)
        return q.gather(-1, actions.long()[..., None]).squeeze(-1)


class CentralCritic(nn.Module):
    """MADDPG-style critic on the concatenated observations and actions of all agents."""

    def __init__(self, n_agents, obs_dim, n_actions, hidden=(64, 32)):
        super().__init__()
        self.n_agents, self.obs_dim, self.n_actions = n_agents, obs_dim, n_actions
        self.input_dim = n_agents * (obs_dim + n_actions)
        self.net = AgentMLP(n_agents, self.input_dim, hidden, 1)

    def q_relaxed(self, obs, actions_soft):
        """obs (B, N, obs), actions_soft (B, N, N, A): row i is the joint action seen by critic i."""
        b, n, _ = obs.shape
        flat_obs = obs.reshape(b, 1, -1).expand(b, n, n * self.obs_dim)
        x = torch.cat([flat_obs, actions_soft.reshape(b, n, -1)], dim=-1)
        return self.net(x).squeeze(-1)

    def q_all(self, hist, actions, stochastic=True, generator=None):
        obs = hist[..., -1, :]
        b, n, _ = obs.shape
        a1h = one_hot(actions, self.n_actions)
        out = []
        for k in range(self.n_actions):
            joint = a1h[:, None].expand(b, n, n, self.n_actions).clone()
            idx = torch.arange(n)
            joint[:, idx, idx] = F.one_hot(torch.tensor(k), self.n_actions).to(torch.float32)
            out.append(self.q_relaxed(obs, joint))
        return torch.stack(out, dim=-1)

    def forward(self, hist, actions, stochastic=True, generator=None):
        obs = hist[..., -1, :]
        b, n, _ = obs.shape
        joint = one_hot(actions, self.n_actions)[:, None].expand(b, n, n, self.n_actions)
        return self.q_relaxed(obs, joint)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, actors: Actors, env_fingerprint: str, critic=None, extra=None):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": env_fingerprint,
        "actor_spec": actors.spec(),
        "actor_state": actors.state_dict(),
        "extra": extra or {},
    }
    if critic is not None:
        blob["critic_state"] = critic.state_dict()
    torch.save(blob, path)


class CheckpointError(RuntimeError):
    pass


def load_actors(path, env_fingerprint: Optional[str] = None):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint written by this package")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    if env_fingerprint is not None and blob["fingerprint"] != env_fingerprint:
        raise CheckpointError(
            f"checkpoint fingerprint {blob['fingerprint']} does not match config fingerprint {env_fingerprint}"
        )
    spec = blob["actor_spec"]
    actors = Actors(spec["n_agents"], spec["obs_dim"], spec["n_actions"], tuple(spec["hidden"]))
    actors.load_state_dict(blob["actor_state"])
    actors.eval()
    return actors, blob
