import numpy as np
import pytest
import torch

from first_explore.envs import BanditDomain, DarkRoomDomain, RayMazeDomain
from first_explore.policy import PolicyModel, model_config_for

torch.set_num_threads(1)


def tiny_model(domain, seed=0, dtype=torch.float32, **overrides):
    cfg = model_config_for(domain, **{"hidden": 16, "heads": 2, "layers": 1, **overrides})
    model = PolicyModel(cfg, torch.Generator().manual_seed(seed))
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


@pytest.fixture
def bandit():
    return BanditDomain(mu1=0.5, arms=4, pulls=6)


@pytest.fixture
def darkroom():
    return DarkRoomDomain(rho=-4, episodes=3)


@pytest.fixture
def raymaze():
    return RayMazeDomain(episodes=2, steps=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
