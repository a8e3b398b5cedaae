"""
Training First-Explore on a small bandit
========================================

A few hundred updates on 5-armed bandits, then a sweep over k, the number of
explore episodes before switching to exploitation.
"""

import numpy as np
import torch
from first_explore.envs import BanditDomain
from first_explore.policy import model_config_for, ModelPolicy
from first_explore.training import TrainConfig, train
from first_explore.selection import select_k
from first_explore.harness import stream, torch_generator

torch.set_num_threads(1)
domain = BanditDomain(mu1=0.3, arms=5, pulls=20)
cfg = TrainConfig.for_domain("bandit", total_updates=300, lr=1e-3)
mc = model_config_for(domain, hidden=32, layers=2)

result = train(domain, cfg, mc, stream(1, "train"), torch_generator(1))
print(result.log[-1])

explore = ModelPolicy(result.theta, "explore", greedy=True)
exploit = ModelPolicy(result.theta, "exploit", greedy=True)
sel = select_k(explore, exploit, domain, 500, stream(1, "select_k"))
print("k* =", sel.k_star)
print(np.round(sel.curve, 2))
