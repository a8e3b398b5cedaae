"""Causal transformer policy with separate explore and exploit heads.

Each token embedding is the sum of an action embedding (with one extra row
for the non-action used by reset/start tokens), a linear map of the
observation, a linear map of the reward, a timestep table and an episode
table.  The trunk is a pre-LayerNorm GPT-2 style stack; the two heads are
linear maps from the final hidden state to action logits and share every
other parameter.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context import ContextTokens

HEADS = ("explore", "exploit")


class ContextCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    action_count: int
    obs_dim: int
    max_timestep: int  # size of the timestep table (h + 1)
    max_episode: int  # size of the episode table (n + 1)
    max_tokens: int
    hidden: int = 128
    heads: int = 4
    layers: int = 3
    mlp_ratio: int = 4

    def to_dict(self):
        return asdict(self)


def model_config_for(domain, slack: int = 8, **overrides) -> ModelConfig:
    """Size the context to one full meta-rollout of ``domain`` plus slack."""
    s = domain.spec
    per_episode = s.episode_length + (1 if domain.uses_reset else 0)
    max_tokens = 1 + (s.episodes + 1) * per_episode + slack
    return ModelConfig(
        action_count=s.action_count,
        obs_dim=s.obs_dim,
        max_timestep=s.episode_length + 1,
        max_episode=s.episodes + 1,
        max_tokens=max_tokens,
        **overrides,
    )


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        if d % heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, mlp_ratio * d)
        self.out = nn.Linear(mlp_ratio * d, d)

    def forward(self, x, cache=None, start: int = 0):
        """x: (B, L, d).  With ``cache=(kbuf, vbuf)`` the new keys/values are
        written at ``start`` and attention runs over the buffered prefix."""
        B, L, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(B, L, self.heads, hd).transpose(1, 2)
        k = k.view(B, L, self.heads, hd).transpose(1, 2)
        v = v.view(B, L, self.heads, hd).transpose(1, 2)
        if cache is not None:
            kbuf, vbuf = cache
            kbuf[:, :, start : start + L] = k
            vbuf[:, :, start : start + L] = v
            k, v = kbuf[:, :, : start + L], vbuf[:, :, : start + L]
        P = k.shape[2] - L
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        mask = torch.ones(L, P + L, dtype=torch.bool).tril(P)
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class _KVBuffer:
    """Preallocated keys/values for one decoding lineage.

    ``filled`` is the high-water mark; a context shorter than it that wants
    to append must branch into a copy, so a cached prefix is never clobbered.
    """

    def __init__(self, layers, B, heads, cap, hd, dtype):
        shape = (B, heads, cap, hd)
        self.k = [torch.zeros(shape, dtype=dtype) for _ in range(layers)]
        self.v = [torch.zeros(shape, dtype=dtype) for _ in range(layers)]
        self.filled = 0

    def branch(self, length):
        new = object.__new__(_KVBuffer)
        new.k = [t.clone() for t in self.k]
        new.v = [t.clone() for t in self.v]
        new.filled = length
        return new


class PolicyModel(nn.Module):
    """Backbone plus explore/exploit heads (the policy parameters)."""

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = c = config
        d = c.hidden
        self.action_emb = nn.Embedding(c.action_count + 1, d)
        self.obs_emb = nn.Linear(c.obs_dim, d, bias=False)
        self.reward_emb = nn.Linear(1, d, bias=False)
        self.time_emb = nn.Embedding(c.max_timestep, d)
        self.episode_emb = nn.Embedding(c.max_episode, d)
        self.blocks = nn.ModuleList([Block(d, c.heads, c.mlp_ratio) for _ in range(c.layers)])
        self.ln_f = nn.LayerNorm(d)
        self.explore_head = nn.Linear(d, c.action_count)
        self.exploit_head = nn.Linear(d, c.action_count)
        self.version = 0
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator=None):
        for m in self.modules():
            if isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, (nn.Linear, nn.Embedding)):
                m.weight.normal_(0.0, 0.02, generator=generator)
                if getattr(m, "bias", None) is not None:
                    m.bias.zero_()
        self.bump()

    def bump(self):
        """Invalidate cached hidden states after an in-place parameter change."""
        self.version += 1

    @property
    def dtype(self):
        return self.action_emb.weight.dtype

    def embed(self, actions, obs, rewards, timesteps, episodes):
        """Token embeddings from numpy or tensor inputs; returns (B, L, d)."""
        c = self.config
        dt = self.dtype
        obs = torch.as_tensor(obs, dtype=dt)
        if obs.shape[-1] != c.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {c.obs_dim}")
        actions = torch.as_tensor(actions, dtype=torch.long)
        rewards = torch.as_tensor(rewards, dtype=dt).unsqueeze(-1)
        timesteps = torch.as_tensor(timesteps, dtype=torch.long)
        episodes = torch.as_tensor(episodes, dtype=torch.long)
        return (
            self.action_emb(actions)
            + self.obs_emb(obs)
            + self.reward_emb(rewards)
            + self.time_emb(timesteps)
            + self.episode_emb(episodes)
        )

    def trunk(self, x, buffer: _KVBuffer | None = None, start: int = 0):
        for i, block in enumerate(self.blocks):
            x = block(x, None if buffer is None else (buffer.k[i], buffer.v[i]), start)
        return self.ln_f(x)

    def head_logits(self, hidden, head: str):
        if head == "explore":
            return self.explore_head(hidden)
        if head == "exploit":
            return self.exploit_head(hidden)
        raise ValueError(f"unknown head {head!r}")

    def hidden_states(self, context: ContextTokens):
        """Full (non-incremental) pass over a context; returns (B, L, d)."""
        if len(context) > self.config.max_tokens:
            raise ContextCapacityError(f"context of {len(context)} tokens exceeds {self.config.max_tokens}")
        _, a, o, r, t, e = context.arrays()
        B = context.batch_size
        x = self.embed(a, o, r, np.tile(t, (B, 1)), np.tile(e, (B, 1)))
        return self.trunk(x)

    def forward(self, context: ContextTokens, head: str):
        """Per-position action distributions (B, L, A)."""
        return self.head_logits(self.hidden_states(context), head).softmax(dim=-1)

    @torch.no_grad()
    def last_hidden(self, context: ContextTokens):
        """Hidden state at the final position, decoding incrementally.

        Results are memoised in ``context.cache`` and resumed from the nearest
        cached ancestor, so growing a context one token at a time costs one
        token of compute per step.
        """
        L = len(context)
        if L == 0:
            raise ValueError("cannot query an empty context")
        if L > self.config.max_tokens:
            raise ContextCapacityError(f"context of {L} tokens exceeds {self.config.max_tokens}")
        key = (id(self), self.version)
        hit = context.cache.get(key)
        if hit is not None:
            return hit[1]
        node = context.cache.get("parent")
        while node is not None and key not in node:
            node = node.get("parent")
        c = self.config
        B = context.batch_size
        if node is None:
            start = 0
            buf = _KVBuffer(c.layers, B, c.heads, c.max_tokens, c.hidden // c.heads, self.dtype)
        else:
            buf, _, start = node[key]
            if buf.filled != start:
                buf = buf.branch(start)
        _, a, o, r, t, e = context.arrays(start)
        x = self.embed(a, o, r, np.tile(t, (B, 1)), np.tile(e, (B, 1)))
        last = self.trunk(x, buf, start)[:, -1]
        buf.filled = L
        context.cache[key] = (buf, last, L)
        return last


class ModelPolicy:
    """Acting wrapper around one head of a ``PolicyModel``."""

    def __init__(self, model: PolicyModel, head: str, temperature: float = 1.0, epsilon: float = 0.0, greedy: bool = False):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.model = model
        self.head = head
        self.temperature = temperature
        self.epsilon = epsilon
        self.greedy = greedy
        self.action_count = model.config.action_count

    def distribution(self, context: ContextTokens) -> np.ndarray:
        h = self.model.last_hidden(context)
        with torch.no_grad():
            logits = self.model.head_logits(h, self.head).double() / self.temperature
            return torch.softmax(logits, dim=-1).numpy()

    def act(self, context: ContextTokens, rng):
        dist = self.distribution(context)
        if self.greedy:
            return greedy_action(dist), dist
        return sample_action(dist, 1.0, self.epsilon, rng), dist


class RandomPolicy:
    def __init__(self, action_count: int):
        self.action_count = action_count

    def act(self, context: ContextTokens, rng):
        B = context.batch_size
        dist = np.full((B, self.action_count), 1.0 / self.action_count)
        return rng.integers(0, self.action_count, size=B), dist


def sample_action(dist, temperature: float, epsilon: float, rng):
    """Sample actions from (B, A) distributions with temperature and epsilon-uniform mixing.

    Both the uniform and the categorical draws are always taken so the rng
    stream advances identically regardless of epsilon.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    if temperature != 1.0:
        logp = np.log(np.clip(dist, 1e-300, None)) / temperature
        logp -= logp.max(axis=-1, keepdims=True)
        dist = np.exp(logp)
        dist /= dist.sum(axis=-1, keepdims=True)
    B, A = dist.shape
    explore = rng.random(B) < epsilon
    uniform = rng.integers(0, A, size=B)
    cdf = np.cumsum(dist, axis=-1)
    u = rng.random(B) * cdf[:, -1]
    sampled = np.minimum((cdf <= u[:, None]).sum(axis=-1), A - 1)
    return np.where(explore, uniform, sampled)


def greedy_action(dist):
    """Lowest-index argmax of each row."""
    return np.argmax(np.atleast_2d(dist), axis=-1)
