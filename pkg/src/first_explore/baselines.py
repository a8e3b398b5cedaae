"""Reference agents: UCB-1, Thompson sampling, uniform random, and a
single-policy control trained on whole-rollout cumulative reward.

Bandit agents use 1-based arms in their scalar API to match ``bandit_step``;
the batched loops work on 0-based columns (column 0 is the fixed arm).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import run_sequence
from .policy import ModelConfig, ModelPolicy, PolicyModel
from .training import TrainConfig, TrainResult, lr_at, make_optimizer, optimizer_step

log = logging.getLogger(__name__)

ALGOS = ("ucb1", "ts", "random", "cumulative")


@dataclass
class ArmStats:
    counts: np.ndarray  # (K,) pulls per arm
    sums: np.ndarray  # (K,) reward totals

    @classmethod
    def empty(cls, arms: int):
        return cls(np.zeros(arms, dtype=np.int64), np.zeros(arms))

    @property
    def means(self):
        return np.divide(self.sums, self.counts, out=np.zeros_like(self.sums), where=self.counts > 0)

    def update(self, arm: int, reward: float) -> "ArmStats":
        counts, sums = self.counts.copy(), self.sums.copy()
        counts[arm - 1] += 1
        sums[arm - 1] += reward
        return ArmStats(counts, sums)


def ucb1_scores(counts, sums, t):
    """mean + sqrt(2 ln t / T_i); arms never pulled score +inf."""
    counts = np.asarray(counts, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        bonus = np.where(counts > 0, np.sqrt(2.0 * np.log(t) / np.maximum(counts, 1)), np.inf)
    return means + bonus


def ucb1_select(stats: ArmStats, t: int) -> int:
    """Arm (1-based) for pull ``t`` (1-based): sweep first, then lowest-index UCB maximiser."""
    if t < 1:
        raise ValueError("pull index t starts at 1")
    unpulled = np.flatnonzero(stats.counts == 0)
    if unpulled.size:
        return int(unpulled[0]) + 1
    return int(np.argmax(ucb1_scores(stats.counts, stats.sums, t))) + 1


@dataclass
class ArmPosterior:
    """Independent Gaussian posteriors with prior N(0, 1) and known noise.

    With ``fixed_point_mass`` the first arm is known exactly to pay ``mu1``.
    """

    counts: np.ndarray
    sums: np.ndarray
    noise_variance: float = 0.5
    mu1: float = 0.5
    fixed_point_mass: bool = True

    @classmethod
    def prior(cls, arms: int, mu1: float, noise_variance: float = 0.5, fixed_point_mass: bool = True):
        return cls(np.zeros(arms, dtype=np.int64), np.zeros(arms), noise_variance, mu1, fixed_point_mass)

    @property
    def precision(self):
        return 1.0 + self.counts / self.noise_variance

    @property
    def mean(self):
        m = (self.sums / self.noise_variance) / self.precision
        if self.fixed_point_mass:
            m = m.copy()
            m[0] = self.mu1
        return m

    @property
    def variance(self):
        v = 1.0 / self.precision
        if self.fixed_point_mass:
            v = v.copy()
            v[0] = 0.0
        return v


def thompson_select(posterior: ArmPosterior, rng) -> int:
    """Arm (1-based) with the largest posterior draw."""
    draw = posterior.mean + np.sqrt(posterior.variance) * rng.standard_normal(len(posterior.counts))
    return int(np.argmax(draw)) + 1


def posterior_update(posterior: ArmPosterior, arm: int, reward: float) -> ArmPosterior:
    if posterior.fixed_point_mass and arm == 1:
        return posterior
    counts, sums = posterior.counts.copy(), posterior.sums.copy()
    counts[arm - 1] += 1
    sums[arm - 1] += reward
    return ArmPosterior(counts, sums, posterior.noise_variance, posterior.mu1, posterior.fixed_point_mass)


def random_policy(action_count: int, rng, size=None):
    return rng.integers(0, action_count, size=size)


def _pull(means, arms, noise_sd, rng):
    E = means.shape[0]
    noise = rng.standard_normal(E)
    return means[np.arange(E), arms] + np.where(arms == 0, 0.0, noise_sd * noise)


def run_bandit_baseline(algo: str, means, pulls: int, noise_variance: float, rng, fixed_point_mass: bool = True):
    """Batched bandit loop.  ``means`` is (E, K) with column 0 the fixed arm.

    Returns the (E, pulls) reward matrix.
    """
    means = np.asarray(means, dtype=np.float64)
    E, K = means.shape
    noise_sd = np.sqrt(noise_variance)
    counts = np.zeros((E, K))
    sums = np.zeros((E, K))
    rewards = np.zeros((E, pulls))
    rows = np.arange(E)
    for t in range(1, pulls + 1):
        if algo == "ucb1":
            if t <= K:
                arms = np.full(E, t - 1)
            else:
                arms = np.argmax(ucb1_scores(counts, sums, t), axis=1)
        elif algo == "ts":
            precision = 1.0 + counts / noise_variance
            mean = (sums / noise_variance) / precision
            sd = 1.0 / np.sqrt(precision)
            if fixed_point_mass:
                mean[:, 0] = means[:, 0]
                sd[:, 0] = 0.0
            arms = np.argmax(mean + sd * rng.standard_normal((E, K)), axis=1)
        elif algo == "random":
            arms = random_policy(K, rng, E)
        else:
            raise ValueError(f"unknown bandit algorithm {algo!r}")
        r = _pull(means, arms, noise_sd, rng)
        counts[rows, arms] += 1
        sums[rows, arms] += r
        rewards[:, t - 1] = r
    return rewards


def control_loss(model: PolicyModel, episodes, context, head: str = "exploit"):
    """REINFORCE loss on whole-rollout return with a batch-mean baseline."""
    G = sum(e.returns for e in episodes)
    adv = torch.as_tensor(G - G.mean(), dtype=model.dtype)
    pos = np.concatenate([e.positions for e in episodes])
    actions = torch.as_tensor(np.concatenate([e.actions for e in episodes], axis=1))
    logits = model.head_logits(model.hidden_states(context.detached())[:, pos], head)
    logp = F.log_softmax(logits, dim=-1).gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    return -(adv[:, None] * logp).mean(), G


@dataclass
class ControlResult(TrainResult):
    head: str = field(default="exploit")


def cumulative_control_train(domain, cfg: TrainConfig, model_cfg: ModelConfig, rng, init_generator=None, head="exploit", callback=None):
    """Train one head on the summed return of all episodes of a rollout."""
    model = PolicyModel(model_cfg, init_generator)
    opt = make_optimizer(model, cfg)
    rows = []
    for update in range(cfg.total_updates):
        lr = lr_at(update, cfg.total_updates, cfg.lr, cfg.warmup_frac)
        for g in opt.param_groups:
            g["lr"] = lr
        envs = domain.sample(rng, cfg.batch_size)
        policy = ModelPolicy(model, head, cfg.temperature, cfg.epsilon)
        episodes, ctx = run_sequence(envs, policy, rng)
        loss, G = control_loss(model, episodes, ctx, head)
        last_good = copy.deepcopy(model.state_dict())
        optimizer_step(model, opt, loss, cfg, update, last_good)
        row = {"update": update, "mean_cumulative_return": float(G.mean()), "loss": float(loss.item()), "lr": lr}
        rows.append(row)
        if callback is not None:
            callback(row, model)
        if update % max(cfg.total_updates // 20, 1) == 0:
            log.info("control update %d cumulative %.3f", update, row["mean_cumulative_return"])
    return ControlResult(model, model, rows, head)


@dataclass
class SequenceEval:
    mean: float
    std: float
    episode_means: np.ndarray
    totals: np.ndarray


def evaluate_sequence(policy, domain, batch: int, rng, chunk: int = 1024) -> SequenceEval:
    """Cumulative reward of a single policy that keeps its whole history."""
    parts = []
    for start in range(0, batch, chunk):
        envs = domain.sample(rng, min(chunk, batch - start))
        episodes, _ = run_sequence(envs, policy, rng)
        parts.append(np.stack([e.returns for e in episodes], axis=1))
    returns = np.concatenate(parts)
    totals = returns.sum(axis=1)
    return SequenceEval(float(totals.mean()), float(totals.std()), returns.mean(axis=0), totals)
