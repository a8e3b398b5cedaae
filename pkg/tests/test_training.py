import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import tiny_model
from first_explore.core import run_meta_rollouts
from first_explore.envs import BanditDomain, DarkRoomDomain
from first_explore.policy import ModelPolicy, model_config_for
from first_explore.training import (
    TrainConfig,
    TrainingDivergence,
    conditional_action_loss,
    lr_at,
    make_optimizer,
    optimizer_step,
    rollout_loss,
    step_nll,
    train,
)


def test_lr_schedule_examples():
    assert lr_at(50, 1000, 1.0) == pytest.approx(0.5)
    assert lr_at(100, 1000, 1.0) == pytest.approx(1.0)
    assert lr_at(550, 1000, 1.0) == pytest.approx(0.5)
    assert lr_at(0, 1000, 1.0) == 0.0
    assert lr_at(1000, 1000, 1.0) == 0.0


def test_domain_defaults():
    assert TrainConfig.for_domain("bandit").sync_period == 1
    assert TrainConfig.for_domain("bandit").epsilon == 0.05
    assert TrainConfig.for_domain("darkroom").sync_period == 10_000
    assert TrainConfig.for_domain("raymaze", sync_period=7).sync_period == 7
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.baseline_b) == (128, 3e-4, 1e-4, 0.0)


def test_uniform_theta_reduces_to_cross_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 4, generator=g, dtype=torch.float64)
    actions = np.array([0, 3, 2, 1, 1, 0])
    nll = step_nll(np.full((6, 4), 0.25), logits, actions)
    ce = F.cross_entropy(logits, torch.as_tensor(actions), reduction="none")
    assert torch.allclose(nll, ce)


def test_confident_phi_has_zero_loss():
    logits = torch.tensor([[0.0, 60.0, 0.0]], dtype=torch.float64)
    assert step_nll(np.full((1, 3), 1 / 3), logits, np.array([1])).item() == pytest.approx(0.0, abs=1e-6)


def test_product_downweights_likely_actions():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    theta = np.array([[0.9, 0.1]])
    # q = theta * phi / sum: the action theta already favours is cheaper to imitate
    assert step_nll(theta, logits, np.array([0])).item() < step_nll(theta, logits, np.array([1])).item()
    assert step_nll(theta, logits, np.array([0])).item() == pytest.approx(-np.log(0.9))


def test_no_labels_gives_zero_loss(bandit, rng):
    model = tiny_model(bandit)
    loss, roll = conditional_action_loss(model, model, bandit.sample(rng, 8), 1e9, rng)
    assert not roll.maximal.any() and not roll.informative.any()
    assert loss.item() == 0.0


def brute_force_loss(phi, roll):
    """Recompute the loss one env and one episode at a time from full forward passes."""
    total, count = 0.0, 0
    B = roll.explore_context.batch_size
    with torch.no_grad():
        for b in range(B):
            full = phi(roll.explore_context.select(b), "explore")[0].double().numpy()
            for i, ep in enumerate(roll.explore):
                if not roll.informative[b, i]:
                    continue
                for t, pos in enumerate(ep.positions):
                    q = ep.probs[b, t] * full[pos]
                    total -= np.log(q[ep.actions[b, t]] / q.sum())
                    count += 1
            for i, ep in enumerate(roll.exploit):
                if not roll.maximal[b, i]:
                    continue
                dist = phi(roll.exploit_contexts[i].select(b), "exploit")[0].double().numpy()
                for t, pos in enumerate(ep.positions):
                    q = ep.probs[b, t] * dist[pos]
                    total -= np.log(q[ep.actions[b, t]] / q.sum())
                    count += 1
    return total / count, count


@pytest.mark.parametrize("domain", [BanditDomain(mu1=0.2, arms=4, pulls=6), DarkRoomDomain(rho=-1, episodes=3)])
def test_loss_matches_brute_force(domain, rng):
    theta = tiny_model(domain, seed=1)
    phi = tiny_model(domain, seed=2)
    envs = domain.sample(rng, 6)
    roll = run_meta_rollouts(envs, ModelPolicy(theta, "explore", epsilon=0.1), ModelPolicy(theta, "exploit", epsilon=0.1), 0.0, rng)
    loss, count = rollout_loss(phi, roll)
    ref, ref_count = brute_force_loss(phi, roll)
    assert count == ref_count > 0
    assert loss.item() == pytest.approx(ref, rel=1e-5)


def test_gradient_only_reaches_phi(bandit, rng):
    theta = tiny_model(bandit, seed=1)
    phi = tiny_model(bandit, seed=2)
    loss, _ = conditional_action_loss(phi, theta, bandit.sample(rng, 8), 0.0, rng)
    loss.backward()
    assert all(p.grad is None for p in theta.parameters())
    assert sum(p.grad.abs().sum() for p in phi.parameters() if p.grad is not None) > 0


def test_nonfinite_loss_aborts(bandit):
    model = tiny_model(bandit)
    opt = make_optimizer(model, TrainConfig())
    good = copy.deepcopy(model.state_dict())
    bad = sum(p.sum() for p in model.parameters()) * float("nan")
    with pytest.raises(TrainingDivergence) as err:
        optimizer_step(model, opt, bad, TrainConfig(), 3, good)
    assert err.value.update == 3 and err.value.last_good is good


def small_run(domain, rng, **cfg):
    model_cfg = model_config_for(domain, hidden=16, heads=2, layers=1)
    cfg = TrainConfig(batch_size=8, total_updates=4, lr=1e-2, **cfg)
    snaps = []
    res = train(domain, cfg, model_cfg, rng, torch.Generator().manual_seed(0), callback=lambda row, th, ph: snaps.append((copy.deepcopy(th.state_dict()), copy.deepcopy(ph.state_dict()))))
    return res, snaps


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_sync_every_update(bandit, rng):
    res, snaps = small_run(bandit, rng, sync_period=1)
    assert all(same(th, ph) for th, ph in snaps)
    assert not same(snaps[0][1], snaps[-1][1])
    assert [r["update"] for r in res.log] == [0, 1, 2, 3]
    assert set(res.log[0]) == {"update", "mean_exploit_return", "informative_rate", "loss", "lr"}


def test_sync_period_three(bandit, rng):
    _, snaps = small_run(bandit, rng, sync_period=3)
    # update 0 runs at lr 0 (start of warmup); update 1 moves phi only
    assert same(snaps[0][0], snaps[1][0])
    assert not same(snaps[1][0], snaps[1][1])
    assert same(snaps[2][0], snaps[2][1])
    assert same(snaps[3][0], snaps[2][0])
    assert not same(snaps[3][0], snaps[3][1])


def test_no_labels_leaves_params_unchanged(bandit, rng):
    model_cfg = model_config_for(bandit, hidden=16, heads=2, layers=1)
    init_state = copy.deepcopy(
        train(bandit, TrainConfig(total_updates=0), model_cfg, rng, torch.Generator().manual_seed(5)).phi.state_dict()
    )
    res = train(bandit, TrainConfig(batch_size=4, total_updates=3, baseline_b=1e9, weight_decay=0.0), model_cfg, rng, torch.Generator().manual_seed(5))
    assert same(init_state, res.phi.state_dict())
    decayed = train(bandit, TrainConfig(batch_size=4, total_updates=3, baseline_b=1e9, lr=0.1, weight_decay=0.5), model_cfg, rng, torch.Generator().manual_seed(5))
    w0 = init_state["exploit_head.weight"]
    factor = np.prod([1 - lr_at(u, 3, 0.1) * 0.5 for u in range(3)])
    assert torch.allclose(decayed.phi.state_dict()["exploit_head.weight"], w0 * factor)


def test_training_is_deterministic(bandit):
    logs = [small_run(bandit, np.random.default_rng(4))[0].log for _ in range(2)]
    assert logs[0] == logs[1]
