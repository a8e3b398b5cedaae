"""Token history shared by the rollout engine and the sequence-model policies.

A context is a batch of aligned token sequences: every sequence in the batch
has the same length and the same (kind, timestep, episode) layout, only the
action / observation / reward payloads differ.  Contexts are persistent values;
``extend`` returns a new context and never mutates the receiver, so an explore
context can be branched into an exploit episode without copying.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STEP = 0
RESET = 1
START = 2

KIND_NAMES = {STEP: "step", RESET: "reset", START: "start"}


@dataclass(frozen=True)
class Token:
    kind: int
    action: np.ndarray  # (B,) int64; non-action id for reset/start tokens
    obs: np.ndarray  # (B, obs_dim)
    reward: np.ndarray  # (B,)
    timestep: int
    episode: int


class ContextTokens:
    """Immutable batched token sequence.

    ``cache`` is a scratch dict that model policies use to memoise hidden
    states for this exact prefix; it chains to the parent's dict so a child
    can resume incremental decoding without holding the parent's arrays.
    """

    __slots__ = ("tokens", "batch_size", "obs_dim", "cache")

    def __init__(self, batch_size: int, obs_dim: int, tokens=(), parent_cache=None):
        self.tokens = tuple(tokens)
        self.batch_size = batch_size
        self.obs_dim = obs_dim
        self.cache = {"parent": parent_cache, "length": len(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def extend(self, kind, action, obs, reward, timestep, episode) -> "ContextTokens":
        action = np.asarray(action, dtype=np.int64).reshape(self.batch_size)
        obs = np.asarray(obs, dtype=np.float64).reshape(self.batch_size, self.obs_dim)
        reward = np.asarray(reward, dtype=np.float64).reshape(self.batch_size)
        if self.tokens:
            last = self.tokens[-1]
            if (episode, timestep) <= (last.episode, last.timestep):
                raise ValueError(
                    f"token order violated: ({episode}, {timestep}) after "
                    f"({last.episode}, {last.timestep})"
                )
        tok = Token(kind, action, obs, reward, int(timestep), int(episode))
        return ContextTokens(self.batch_size, self.obs_dim, self.tokens + (tok,), self.cache)

    def detached(self) -> "ContextTokens":
        """Same tokens without any cached model state."""
        return ContextTokens(self.batch_size, self.obs_dim, self.tokens)

    def arrays(self, start: int = 0, stop: int | None = None):
        """Stack tokens[start:stop] into (kinds, actions, obs, rewards, timesteps, episodes)."""
        toks = self.tokens[start:stop]
        B, L = self.batch_size, len(toks)
        if L == 0:
            return (
                np.zeros(0, np.int64),
                np.zeros((B, 0), np.int64),
                np.zeros((B, 0, self.obs_dim)),
                np.zeros((B, 0)),
                np.zeros(0, np.int64),
                np.zeros(0, np.int64),
            )
        kinds = np.array([t.kind for t in toks], dtype=np.int64)
        actions = np.stack([t.action for t in toks], axis=1)
        obs = np.stack([t.obs for t in toks], axis=1)
        rewards = np.stack([t.reward for t in toks], axis=1)
        timesteps = np.array([t.timestep for t in toks], dtype=np.int64)
        episodes = np.array([t.episode for t in toks], dtype=np.int64)
        return kinds, actions, obs, rewards, timesteps, episodes

    def select(self, index) -> "ContextTokens":
        """Sub-batch view (drops the model cache)."""
        index = np.atleast_1d(np.asarray(index))
        toks = [
            Token(t.kind, t.action[index], t.obs[index], t.reward[index], t.timestep, t.episode)
            for t in self.tokens
        ]
        return ContextTokens(len(index), self.obs_dim, toks)

    def repeat(self, times: int) -> "ContextTokens":
        """Tile every sequence ``times`` times along the batch axis (env-major)."""
        toks = [
            Token(
                t.kind,
                np.repeat(t.action, times),
                np.repeat(t.obs, times, axis=0),
                np.repeat(t.reward, times),
                t.timestep,
                t.episode,
            )
            for t in self.tokens
        ]
        return ContextTokens(self.batch_size * times, self.obs_dim, toks)

    def is_prefix_of(self, other: "ContextTokens") -> bool:
        if len(self) > len(other) or self.batch_size != other.batch_size:
            return False
        for a, b in zip(self.tokens, other.tokens):
            if a is b:
                continue
            if (a.kind, a.timestep, a.episode) != (b.kind, b.timestep, b.episode):
                return False
            if not (
                np.array_equal(a.action, b.action)
                and np.array_equal(a.obs, b.obs)
                and np.array_equal(a.reward, b.reward)
            ):
                return False
        return True
