"""Post-training choice of the explore/exploit switch point, and evaluation.

The combined policy explores for the first ``k`` episodes of a meta-rollout and
exploits for the remaining ``n - k``.  Exploit episodes condition only on the
explore episodes, never on earlier exploit episodes, as during training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import initial_context, run_episodes

DEFAULT_EVAL_ENVS = {"bandit": 12800, "darkroom": 1000, "raymaze": 1000}


def inference_policy(k: int, i: int, n: int | None = None) -> str:
    """Head used for episode ``i`` (1-based) when switching after ``k`` episodes."""
    if i < 1 or (n is not None and i > n):
        raise IndexError(f"episode index {i} outside 1..{n}")
    return "explore" if i <= k else "exploit"


@dataclass
class CombinedPolicy:
    explore: object
    exploit: object
    k: int


@dataclass
class EvalResult:
    mean: float
    std: float
    episode_means: np.ndarray  # (n,) mean reward of each episode slot
    totals: np.ndarray  # (envs,) cumulative reward per env

    @property
    def cumulative_means(self):
        return np.cumsum(self.episode_means)


@dataclass
class KSelection:
    k_star: int
    curve: np.ndarray  # (n+1,) mean cumulative reward per k
    std: np.ndarray  # (n+1,)
    n_envs: int


def _chunks(total, size):
    for start in range(0, total, size):
        yield min(size, total - start)


def run_combined(envs, policy: CombinedPolicy, rng, n: int | None = None) -> np.ndarray:
    """Episode returns (B, n) of one combined meta-rollout per env."""
    n = envs.domain.spec.episodes if n is None else n
    if not 0 <= policy.k <= n:
        raise ValueError(f"k={policy.k} outside 0..{n}")
    ctx = initial_context(envs.domain, len(envs))
    out = np.zeros((len(envs), n))
    for i in range(n):
        if inference_policy(policy.k, i + 1, n) == "explore":
            ep, ctx = run_episodes(envs, policy.explore, ctx, rng, i)
        else:
            ep, _ = run_episodes(envs, policy.exploit, ctx, rng, policy.k)
        out[:, i] = ep.returns
    return out


def evaluate(policy: CombinedPolicy, domain, batch: int, rng, chunk: int = 1024) -> EvalResult:
    """Cumulative-reward statistics of ``policy`` over ``batch`` fresh envs.

    Model policies should be constructed with ``greedy=True`` and no epsilon.
    """
    if batch < 1:
        raise ValueError("batch must be positive")
    parts = [run_combined(domain.sample(rng, size), policy, rng) for size in _chunks(batch, chunk)]
    returns = np.concatenate(parts)
    totals = returns.sum(axis=1)
    return EvalResult(float(totals.mean()), float(totals.std()), returns.mean(axis=0), totals)


def k_sweep_returns(envs, explore, exploit, rng, n: int | None = None) -> np.ndarray:
    """Cumulative reward (B, n+1) for every switch point, sharing the explore prefix.

    Column k is the total of the first k explore episodes plus n - k exploit
    episodes conditioned on those k.
    """
    n = envs.domain.spec.episodes if n is None else n
    ctx = initial_context(envs.domain, len(envs))
    totals = np.zeros((len(envs), n + 1))
    explored = np.zeros(len(envs))
    for k in range(n + 1):
        exploit_sum = np.zeros(len(envs))
        for _ in range(n - k):
            ep, _ = run_episodes(envs, exploit, ctx, rng, k)
            exploit_sum += ep.returns
        totals[:, k] = explored + exploit_sum
        if k < n:
            ep, ctx = run_episodes(envs, explore, ctx, rng, k)
            explored = explored + ep.returns
    return totals


def select_k(explore, exploit, domain, eval_envs: int, rng, n: int | None = None, chunk: int = 1024) -> KSelection:
    """Sweep k = 0..n on fresh envs; the argmax (lowest k on ties) wins."""
    if eval_envs < 1:
        raise ValueError("eval_envs must be positive")
    parts = [k_sweep_returns(domain.sample(rng, size), explore, exploit, rng, n) for size in _chunks(eval_envs, chunk)]
    totals = np.concatenate(parts)
    curve = totals.mean(axis=0)
    return KSelection(int(np.argmax(curve)), curve, totals.std(axis=0), eval_envs)
