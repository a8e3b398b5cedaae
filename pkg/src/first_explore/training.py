"""Conditional action-cloning trainer for the explore/exploit heads.

A rollout copy ``theta`` plays batched meta-rollouts; a successor copy ``phi``
is trained to reproduce the actions of the good episodes only: exploit
episodes that match the best exploit return so far ("maximal") and explore
episodes after which the exploit return strictly improved ("informative").
Every ``sync_period`` updates ``theta`` is overwritten with ``phi``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import MetaRolloutBatch, label_meta_rollout, run_meta_rollouts
from .policy import ModelConfig, ModelPolicy, PolicyModel

__all__ = [
    "TrainConfig",
    "TrainingDivergence",
    "conditional_action_loss",
    "label_meta_rollout",
    "lr_at",
    "rollout_loss",
    "step_nll",
    "train",
]

log = logging.getLogger(__name__)

DOMAIN_DEFAULTS = {
    "bandit": {"sync_period": 1, "epsilon": 0.05, "total_updates": 200_000},
    "darkroom": {"sync_period": 10_000, "epsilon": 0.0, "total_updates": 1_000_000},
    "raymaze": {"sync_period": 5_000, "epsilon": 0.0, "total_updates": 1_000_000},
}


@dataclass
class TrainConfig:
    baseline_b: float = 0.0
    sync_period: int = 1
    batch_size: int = 128
    total_updates: int = 1000
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    grad_clip: float = 1.0
    epsilon: float = 0.0
    temperature: float = 1.0

    @classmethod
    def for_domain(cls, name: str, **overrides):
        return cls(**{**DOMAIN_DEFAULTS.get(name, {}), **overrides})

    def to_dict(self):
        return asdict(self)


class TrainingDivergence(RuntimeError):
    def __init__(self, message, update=None, last_good=None):
        super().__init__(message)
        self.update = update
        self.last_good = last_good


def lr_at(step: int, total: int, peak: float, warmup_frac: float = 0.1) -> float:
    """Piecewise-linear schedule: 0 -> peak over the warmup, then back to 0."""
    warm = warmup_frac * total
    if step < warm:
        return peak * step / warm
    return peak * max(total - step, 0) / (total - warm)


def step_nll(theta_probs, phi_logits, actions):
    """-log of the renormalised product p_theta * p_phi at the taken actions.

    theta_probs: (..., A) array, treated as a constant.
    phi_logits: (..., A) tensor.  actions: (...) ints.
    """
    log_theta = torch.as_tensor(np.log(np.clip(theta_probs, 1e-300, None)), dtype=phi_logits.dtype)
    logq = F.log_softmax(log_theta + F.log_softmax(phi_logits, dim=-1), dim=-1)
    a = torch.as_tensor(actions, dtype=torch.long).unsqueeze(-1)
    return -logq.gather(-1, a).squeeze(-1)


def _gather(logits, positions):
    # logits (B, L, A); positions (n, h) -> (B, n, h, A)
    return logits[:, torch.as_tensor(positions, dtype=torch.long)]


def phi_logits(phi: PolicyModel, rollout: MetaRolloutBatch):
    """Successor logits at every decision of a recorded rollout.

    Returns (explore, exploit) tensors of shape (B, n, h, A).
    """
    hidden = phi.hidden_states(rollout.explore_context)
    x_pos = np.stack([e.positions for e in rollout.explore])
    explore = _gather(phi.explore_head(hidden), x_pos)
    exploit = []
    for ep, ctx, prefix in zip(rollout.exploit, rollout.exploit_contexts, rollout.exploit_prefix_lens):
        if ep.positions.max() < prefix:
            # decisions read only shared-prefix tokens: reuse the explore pass
            h = hidden[:, ep.positions]
        else:
            h = phi.hidden_states(ctx)[:, ep.positions]
        exploit.append(phi.exploit_head(h))
    return explore, torch.stack(exploit, dim=1)


def rollout_loss(phi: PolicyModel, rollout: MetaRolloutBatch):
    """Mean per-step loss over the labelled steps of a recorded rollout.

    Returns (loss tensor, number of labelled steps).
    """
    x_logits, e_logits = phi_logits(phi, rollout)
    x_probs = np.stack([e.probs for e in rollout.explore], axis=1)
    e_probs = np.stack([e.probs for e in rollout.exploit], axis=1)
    x_act = np.stack([e.actions for e in rollout.explore], axis=1)
    e_act = np.stack([e.actions for e in rollout.exploit], axis=1)
    nll_x = step_nll(x_probs, x_logits, x_act)
    nll_e = step_nll(e_probs, e_logits, e_act)
    h = x_act.shape[-1]
    mask_x = torch.as_tensor(np.repeat(rollout.informative[:, :, None], h, axis=2), dtype=nll_x.dtype)
    mask_e = torch.as_tensor(np.repeat(rollout.maximal[:, :, None], h, axis=2), dtype=nll_e.dtype)
    count = int(mask_x.sum().item() + mask_e.sum().item())
    total = (nll_x * mask_x).sum() + (nll_e * mask_e).sum()
    return total / max(count, 1), count


def conditional_action_loss(phi: PolicyModel, theta: PolicyModel, envs, b: float, rng, epsilon=0.0, temperature=1.0):
    """Run one batch of meta-rollouts with ``theta`` and score them with ``phi``.

    Returns (loss, rollout).  Gradients flow only into ``phi``.
    """
    explore = ModelPolicy(theta, "explore", temperature, epsilon)
    exploit = ModelPolicy(theta, "exploit", temperature, epsilon)
    rollout = run_meta_rollouts(envs, explore, exploit, b, rng)
    loss, _ = rollout_loss(phi, rollout)
    return loss, rollout


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _finite(model) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def optimizer_step(model, opt, loss, cfg: TrainConfig, update: int, last_good):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss at update {update}", update, last_good)
    opt.zero_grad(set_to_none=False)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    model.bump()
    if not _finite(model):
        raise TrainingDivergence(f"non-finite parameters after update {update}", update, last_good)


@dataclass
class TrainResult:
    theta: PolicyModel
    phi: PolicyModel
    log: list  # dict rows


def train(domain, cfg: TrainConfig, model_cfg: ModelConfig, rng, init_generator=None, callback=None) -> TrainResult:
    """Train explore/exploit heads on ``domain``; returns the final rollout params."""
    phi = PolicyModel(model_cfg, init_generator)
    theta = copy.deepcopy(phi)
    opt = make_optimizer(phi, cfg)
    rows = []
    last_good = copy.deepcopy(phi.state_dict())
    for update in range(cfg.total_updates):
        lr = lr_at(update, cfg.total_updates, cfg.lr, cfg.warmup_frac)
        for g in opt.param_groups:
            g["lr"] = lr
        envs = domain.sample(rng, cfg.batch_size)
        loss, rollout = conditional_action_loss(phi, theta, envs, cfg.baseline_b, rng, cfg.epsilon, cfg.temperature)
        optimizer_step(phi, opt, loss, cfg, update, last_good)
        if (update + 1) % cfg.sync_period == 0:
            theta.load_state_dict(phi.state_dict())
            theta.bump()
            last_good = copy.deepcopy(phi.state_dict())
        row = {
            "update": update,
            "mean_exploit_return": float(rollout.exploit_returns.mean()),
            "informative_rate": float(rollout.informative.mean()),
            "loss": float(loss.item()),
            "lr": lr,
        }
        rows.append(row)
        if callback is not None:
            callback(row, theta, phi)
        if update % max(cfg.total_updates // 20, 1) == 0:
            log.info("update %d exploit %.3f informative %.3f loss %.4f", update, row["mean_exploit_return"], row["informative_rate"], row["loss"])
    return TrainResult(theta, phi, rows)


def init_generator(seed_seq) -> torch.Generator:
    """Torch generator seeded from a numpy SeedSequence (or int)."""
    if isinstance(seed_seq, np.random.SeedSequence):
        seed = int(seed_seq.generate_state(1, dtype=np.uint64)[0] % (2**63))
    else:
        seed = int(seed_seq)
    return torch.Generator().manual_seed(seed)
