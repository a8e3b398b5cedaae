"""POMDP abstractions and the interleaved explore/exploit rollout engine.

All rollouts are batched: a batch of environments sampled from one domain is
stepped in lock-step, so every sequence in a context batch shares the same
token layout.  The single-environment entry points (``run_episode``,
``run_meta_rollout``) are thin wrappers around a batch of size one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .context import RESET, START, STEP, ContextTokens


@dataclass(frozen=True)
class EnvSpec:
    state_space: str
    action_count: int
    obs_dim: int
    episode_length: int
    episodes: int
    discount: float = 1.0

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("action_count must be >= 2")
        if self.obs_dim < 1 or self.episode_length < 1 or self.episodes < 1:
            raise ValueError("obs_dim, episode_length and episodes must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")


class Domain:
    """A distribution over environments plus the batch stepping machinery.

    Subclasses set ``name``, ``spec`` and ``uses_reset`` and implement
    ``sample_envs`` and ``batch``.
    """

    name = "domain"
    spec: EnvSpec
    uses_reset = True

    def sample_envs(self, rng, count):
        raise NotImplementedError

    def batch(self, envs) -> "EnvBatch":
        raise NotImplementedError

    def sample(self, rng, count) -> "EnvBatch":
        return self.batch(self.sample_envs(rng, count))

    def params(self) -> dict:
        return {}


class EnvBatch:
    """Lock-step view over a list of environment instances."""

    def __init__(self, domain: Domain, envs):
        self.domain = domain
        self.envs = list(envs)

    def __len__(self):
        return len(self.envs)

    def reset(self):
        """Return (state, initial observations of shape (B, obs_dim))."""
        raise NotImplementedError

    def step(self, state, actions, rng):
        """Return (state, observations (B, obs_dim), rewards (B,))."""
        raise NotImplementedError

    def repeat(self, times: int) -> "EnvBatch":
        return self.domain.batch([e for e in self.envs for _ in range(times)])


@dataclass
class Episode:
    steps: list  # (observation, action, reward) triples
    return_G: float

    def __len__(self):
        return len(self.steps)


@dataclass
class EpisodeBatch:
    actions: np.ndarray  # (B, h)
    rewards: np.ndarray  # (B, h)
    observations: np.ndarray  # (B, h, obs_dim), observation after each action
    probs: np.ndarray  # (B, h, A), distribution the action was drawn from
    positions: np.ndarray  # (h,), context index the decision was read at
    returns: np.ndarray  # (B,)
    episode_index: int

    def episode(self, i: int) -> Episode:
        steps = [
            (self.observations[i, t].copy(), int(self.actions[i, t]), float(self.rewards[i, t]))
            for t in range(self.actions.shape[1])
        ]
        return Episode(steps, float(self.returns[i]))


def discounted_return(rewards, discount=1.0):
    rewards = np.asarray(rewards, dtype=np.float64)
    h = rewards.shape[-1]
    if discount == 1.0:
        return rewards.sum(axis=-1)
    return (rewards * discount ** np.arange(h)).sum(axis=-1)


def non_action(spec: EnvSpec) -> int:
    return spec.action_count


def initial_context(domain: Domain, batch_size: int) -> ContextTokens:
    """Empty history; domains without reset tokens get a single start token."""
    spec = domain.spec
    ctx = ContextTokens(batch_size, spec.obs_dim)
    if not domain.uses_reset:
        ctx = ctx.extend(
            START,
            np.full(batch_size, non_action(spec)),
            np.zeros((batch_size, spec.obs_dim)),
            np.zeros(batch_size),
            0,
            0,
        )
    return ctx


def run_episodes(envs: EnvBatch, policy, context: ContextTokens, rng, episode_index: int):
    """Play one episode on every env of the batch.

    The policy is queried once per step on the context extended by the tokens
    of the current episode.  Returns (EpisodeBatch, extended context).
    """
    spec = envs.domain.spec
    B, h, A = len(envs), spec.episode_length, spec.action_count
    if context.batch_size != B:
        raise ValueError("context batch does not match env batch")
    state, obs = envs.reset()
    ctx = context
    if envs.domain.uses_reset:
        ctx = ctx.extend(RESET, np.full(B, non_action(spec)), obs, np.zeros(B), 0, episode_index)
    actions = np.zeros((B, h), dtype=np.int64)
    rewards = np.zeros((B, h))
    observations = np.zeros((B, h, spec.obs_dim))
    probs = np.zeros((B, h, A))
    positions = np.zeros(h, dtype=np.int64)
    for t in range(h):
        positions[t] = len(ctx) - 1
        a, p = policy.act(ctx, rng)
        a = np.asarray(a, dtype=np.int64)
        if a.shape != (B,) or (a < 0).any() or (a >= A).any():
            raise IndexError(f"policy emitted invalid actions {a!r} for {A} actions")
        state, obs, r = envs.step(state, a, rng)
        actions[:, t], rewards[:, t], observations[:, t], probs[:, t] = a, r, obs, p
        ctx = ctx.extend(STEP, a, obs, r, t + 1, episode_index)
    returns = discounted_return(rewards, spec.discount)
    return EpisodeBatch(actions, rewards, observations, probs, positions, returns, episode_index), ctx


def label_meta_rollout(exploit_returns, b: float):
    """Maximal / informative labels for one or many rollouts.

    ``exploit_returns`` has shape (n,) or (B, n).  The running best starts at
    ``b``; an exploit episode is maximal when it meets the best so far and the
    preceding explore episode is informative when it strictly beats it.  The
    running best only moves on strict improvement.
    """
    r = np.asarray(exploit_returns, dtype=np.float64)
    squeeze = r.ndim == 1
    r = np.atleast_2d(r)
    best = np.full(r.shape[0], float(b))
    maximal = np.zeros(r.shape, dtype=bool)
    informative = np.zeros(r.shape, dtype=bool)
    for i in range(r.shape[1]):
        maximal[:, i] = r[:, i] >= best
        informative[:, i] = r[:, i] > best
        best = np.where(informative[:, i], r[:, i], best)
    if squeeze:
        return maximal[0], informative[0]
    return maximal, informative


@dataclass
class MetaRolloutRecord:
    explore_episodes: list
    exploit_episodes: list
    exploit_labels: list  # maximal
    explore_labels: list  # informative
    baseline_b: float


@dataclass
class MetaRolloutBatch:
    explore: list  # n EpisodeBatch
    exploit: list  # n EpisodeBatch
    maximal: np.ndarray  # (B, n)
    informative: np.ndarray  # (B, n)
    baseline_b: float
    explore_context: ContextTokens
    exploit_contexts: list  # n ContextTokens, each = explore prefix + own tokens
    exploit_prefix_lens: list = field(default_factory=list)

    @property
    def explore_returns(self):
        return np.stack([e.returns for e in self.explore], axis=1)

    @property
    def exploit_returns(self):
        return np.stack([e.returns for e in self.exploit], axis=1)

    def record(self, i: int) -> MetaRolloutRecord:
        return MetaRolloutRecord(
            [e.episode(i) for e in self.explore],
            [e.episode(i) for e in self.exploit],
            [bool(x) for x in self.maximal[i]],
            [bool(x) for x in self.informative[i]],
            self.baseline_b,
        )


def run_meta_rollouts(envs: EnvBatch, explore, exploit, b: float, rng, episodes: int | None = None):
    """Interleave explore and exploit episodes on a batch of environments.

    Explore episode i extends the cumulative context; exploit episode i is
    conditioned on that context plus its own tokens and is then discarded.
    """
    n = envs.domain.spec.episodes if episodes is None else episodes
    ctx = initial_context(envs.domain, len(envs))
    explore_eps, exploit_eps, exploit_ctxs, prefix_lens = [], [], [], []
    for i in range(n):
        ep, ctx = run_episodes(envs, explore, ctx, rng, i)
        explore_eps.append(ep)
        prefix_lens.append(len(ctx))
        ep, ectx = run_episodes(envs, exploit, ctx, rng, i + 1)
        exploit_eps.append(ep)
        exploit_ctxs.append(ectx.detached())
    returns = np.stack([e.returns for e in exploit_eps], axis=1)
    maximal, informative = label_meta_rollout(returns, b)
    return MetaRolloutBatch(
        explore_eps, exploit_eps, maximal, informative, float(b), ctx.detached(), exploit_ctxs, prefix_lens
    )


def run_sequence(envs: EnvBatch, policy, rng, episodes: int | None = None):
    """One policy plays every episode, each appended to the context.

    This is the single-policy (cumulative-reward) layout.  Returns the list
    of EpisodeBatch and the final context.
    """
    n = envs.domain.spec.episodes if episodes is None else episodes
    ctx = initial_context(envs.domain, len(envs))
    out = []
    for i in range(n):
        ep, ctx = run_episodes(envs, policy, ctx, rng, i)
        out.append(ep)
    return out, ctx


def run_episode(envs: EnvBatch, policy, context: ContextTokens, rng, episode_index: int = 0):
    """Single-environment episode; ``envs`` must hold exactly one env."""
    if len(envs) != 1:
        raise ValueError("run_episode expects a batch of one environment")
    ep, ctx = run_episodes(envs, policy, context, rng, episode_index)
    return ep.episode(0), ctx


def run_meta_rollout(envs: EnvBatch, explore, exploit, b: float, rng) -> MetaRolloutRecord:
    if len(envs) != 1:
        raise ValueError("run_meta_rollout expects a batch of one environment")
    return run_meta_rollouts(envs, explore, exploit, b, rng).record(0)
