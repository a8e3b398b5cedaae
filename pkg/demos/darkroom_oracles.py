"""
Dark-room reward dynamics
=========================

The revisit value, the break-even revisit count and the myopic bound, each
checked against a Monte-Carlo estimate.
"""

import numpy as np
from first_explore.oracles import closed_form_checks, mc_check, expected_revisit_value, revisit_threshold

rho = -4.0
for n in (0, 1, 2, 3, 9):
    print(n, expected_revisit_value(rho, n))

# a first visit is a loss until it can be revisited more than this many times
print(revisit_threshold(rho))

rng = np.random.default_rng(0)
for name, value, sampler, stat in closed_form_checks():
    print(name, mc_check(value, sampler, 1_000_000, 0.02, rng, statistic=stat))
