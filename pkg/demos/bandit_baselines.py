"""
Bandit reference agents
=======================

UCB-1, Thompson sampling and uniform random on 10-armed bandits whose first
arm pays a known constant.
"""

import numpy as np
from first_explore.envs import BanditDomain
from first_explore.baselines import run_bandit_baseline
from first_explore.oracles import bandit_best_arm_value

rng = np.random.default_rng(0)
domain = BanditDomain(mu1=0.5, arms=10, pulls=100)

# (E, K) arm means; column 0 is the fixed arm
means = domain.sample(rng, 2000).means

for algo in ("ucb1", "ts", "random"):
    rewards = run_bandit_baseline(algo, means, domain.pulls, 0.5, np.random.default_rng(1))
    print(algo, rewards.sum(axis=1).mean())

# a perfect agent pulls the best arm every time
print("best arm every pull", domain.pulls * bandit_best_arm_value(0.5, 10))
