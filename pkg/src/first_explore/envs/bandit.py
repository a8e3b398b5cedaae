"""Bandits with one fixed arm.

Arm 1 always pays ``mu1``; arms 2..A pay their environment mean
``v_a ~ N(0, 1)`` plus fresh Gaussian noise on every pull.  Arms are 1-based
in the scalar API (``bandit_step``) and 0-based as policy actions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Domain, EnvBatch, EnvSpec


@dataclass(frozen=True)
class BanditEnv:
    mu1: float
    arm_means: np.ndarray  # means of arms 2..A
    noise_variance: float = 0.5

    @property
    def arms(self) -> int:
        return len(self.arm_means) + 1

    @property
    def means(self) -> np.ndarray:
        return np.concatenate([[self.mu1], self.arm_means])


def sample_bandit(rng, mu1: float, arms: int = 10, noise_variance: float = 0.5) -> BanditEnv:
    return BanditEnv(float(mu1), rng.standard_normal(arms - 1), float(noise_variance))


def bandit_step(env: BanditEnv, arm: int, rng) -> float:
    if not 1 <= arm <= env.arms:
        raise IndexError(f"arm {arm} outside 1..{env.arms}")
    if arm == 1:
        return env.mu1
    return float(env.arm_means[arm - 2] + np.sqrt(env.noise_variance) * rng.standard_normal())


def bandit_oracle_value(env: BanditEnv) -> float:
    return float(max(env.mu1, env.arm_means.max()))


class BanditBatch(EnvBatch):
    def __init__(self, domain, envs):
        super().__init__(domain, envs)
        self.means = np.stack([e.means for e in self.envs]) if self.envs else np.zeros((0, domain.arms))
        self.noise_sd = np.sqrt(domain.noise_variance)

    def reset(self):
        return None, np.zeros((len(self), 1))

    def step(self, state, actions, rng):
        B = len(self)
        noise = rng.standard_normal(B)
        rewards = self.means[np.arange(B), actions] + np.where(actions == 0, 0.0, self.noise_sd * noise)
        return state, np.zeros((B, 1)), rewards


class BanditDomain(Domain):
    """Each pull is a one-step episode; a meta-rollout is ``pulls`` episodes."""

    name = "bandit"
    uses_reset = False

    def __init__(self, mu1: float = 0.5, arms: int = 10, pulls: int = 100, noise_variance: float = 0.5):
        self.mu1 = float(mu1)
        self.arms = int(arms)
        self.pulls = int(pulls)
        self.noise_variance = float(noise_variance)
        self.spec = EnvSpec("stateless", self.arms, 1, 1, self.pulls)

    def sample_envs(self, rng, count):
        # one draw for all envs keeps sampling fast at 10^4+ envs
        means = rng.standard_normal((count, self.arms - 1))
        return [BanditEnv(self.mu1, m, self.noise_variance) for m in means]

    def batch(self, envs):
        return BanditBatch(self, envs)

    def params(self):
        return {"mu1": self.mu1, "arms": self.arms, "pulls": self.pulls, "noise_variance": self.noise_variance}
