"""Closed-form reward dynamics, Monte-Carlo cross-checks and a rank test.

The dark-room results assume object values ``v ~ U[rho, 2]`` and an agent
that revisits a discovered object only when it paid off.  The ray-maze bound
abstracts navigation away: any goal can be reached in one episode and only
the first goal touched in an episode pays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MWU_EXACT_MAX = 8


def expected_revisit_value(rho: float, n: int) -> float:
    """Expected total of one visit to a random object plus n revisits iff it was positive."""
    if rho >= 2:
        raise ValueError("rho must be < 2")
    return (rho + 2) / 2 + n * 2 / (2 - rho)


def revisit_threshold(rho: float) -> float:
    """Revisits needed before a first visit breaks even: n > (rho^2 - 4) / 4."""
    return (rho * rho - 4) / 4


def myopic_optimal_bound(rho: float, n: int, objects: int = 8, cells: int = 81, first_visits: int = 9) -> float:
    """Upper bound for one perfect exploring episode then myopic exploitation."""
    return objects * first_visits / cells * expected_revisit_value(rho, n)


@lru_cache(maxsize=None)
def _maze_value(p: float, m: int, unknown: int, known: bool) -> tuple[float, bool]:
    """(value, visit_new_goal) with m episodes left."""
    if m == 0:
        return 0.0, False
    if known:
        return float(m), False
    stay = _maze_value(p, m - 1, unknown, False)[0]
    if unknown == 0:
        return stay, False
    visit = p * (1 + _maze_value(p, m - 1, unknown - 1, True)[0]) + (1 - p) * (
        -1 + _maze_value(p, m - 1, unknown - 1, False)[0]
    )
    return (visit, True) if visit > stay else (stay, False)


def raymaze_optimal_bound(p: float, episodes: int, goals: int = 3) -> float:
    """Expected total of the threshold policy: try a new goal while that pays in expectation."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return _maze_value(float(p), int(episodes), int(goals), False)[0]


def raymaze_visits_new_goal(p: float, episodes_left: int, unknown: int, known: bool) -> bool:
    return _maze_value(float(p), int(episodes_left), int(unknown), bool(known))[1]


def bandit_best_arm_value(mu1: float, arms: int = 10, upper: float = 12.0, points: int = 200_001) -> float:
    """E[max(mu1, max of arms-1 standard normals)] by quadrature.

    Uses E[Y] = c + integral over (c, inf) of P(Y > x) dx with c = mu1 and
    P(Y > x) = 1 - Phi(x)^(arms-1).
    """
    x = np.linspace(mu1, max(upper, mu1 + 1.0), points)
    phi = 0.5 * np.array([math.erfc(-v / math.sqrt(2)) for v in x])
    tail = 1.0 - phi ** (arms - 1)
    return float(mu1 + np.trapezoid(tail, x))


# Monte-Carlo samplers: each takes (rng, count) and returns per-sample values.

def revisit_sampler(rho: float, n: int):
    def sample(rng, count):
        v = rng.uniform(rho, 2.0, count)
        return v + n * np.maximum(v, 0.0)

    return sample


def threshold_sampler(rho: float):
    """Pairs (v, v+) whose mean ratio -E[v]/E[v+] estimates the break-even revisit count."""

    def sample(rng, count):
        v = rng.uniform(rho, 2.0, count)
        return np.stack([v, np.maximum(v, 0.0)], axis=1)

    return sample


def threshold_statistic(samples):
    return -samples[:, 0].mean() / samples[:, 1].mean()


def myopic_sampler(rho: float, n: int, objects: int = 8, size: int = 9, first_visits: int = 9):
    """Place objects uniformly, visit a fixed set of ``first_visits`` cells once,
    then revisit every discovered object n times iff its value was positive."""

    def sample(rng, count):
        cells = rng.integers(0, size * size, (count, objects))
        v = rng.uniform(rho, 2.0, (count, objects))
        found = cells < first_visits
        return (found * (v + n * np.maximum(v, 0.0))).sum(axis=1)

    return sample


def raymaze_sampler(p: float, episodes: int, goals: int = 3):
    """Abstract goal process played by the threshold policy."""

    def sample(rng, count):
        treasure = rng.random((count, goals)) < p
        total = np.zeros(count)
        tried = np.zeros(count, dtype=np.int64)
        known = np.zeros(count, dtype=bool)
        for m in range(episodes, 0, -1):
            total += known
            for u in range(goals + 1):
                mask = ~known & (goals - tried == u)
                if mask.any() and raymaze_visits_new_goal(p, m, u, False):
                    hit = treasure[mask, tried[mask]]
                    total[mask] += np.where(hit, 1.0, -1.0)
                    known[mask] = hit
                    tried[mask] += 1
        return total

    return sample


@dataclass
class MCResult:
    passed: bool
    estimate: float
    expected: float
    tolerance: float
    n_samples: int

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: estimate {self.estimate:.5f} vs closed form {self.expected:.5f} (tol {self.tolerance})"


def mc_check(expected: float, sampler, n_samples: int, tolerance: float, rng, statistic=None, chunk: int = 1_000_000) -> MCResult:
    """Compare a closed-form value with a Monte-Carlo estimate from ``sampler``."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    parts = [sampler(rng, min(chunk, n_samples - s)) for s in range(0, n_samples, chunk)]
    samples = np.concatenate(parts)
    est = float(samples.mean()) if statistic is None else float(statistic(samples))
    return MCResult(abs(est - expected) <= tolerance, est, float(expected), tolerance, n_samples)


def closed_form_checks(rho=-4.0, n=9, p=0.3, episodes=4, goals=3):
    """(name, closed form, sampler, statistic) for every closed-form oracle."""
    return [
        ("expected_revisit_value", expected_revisit_value(rho, n), revisit_sampler(rho, n), None),
        ("revisit_threshold", revisit_threshold(rho), threshold_sampler(rho), threshold_statistic),
        ("myopic_optimal_bound", myopic_optimal_bound(rho, n), myopic_sampler(rho, n), None),
        ("raymaze_optimal_bound", raymaze_optimal_bound(p, episodes, goals), raymaze_sampler(p, episodes, goals), None),
    ]


def _midranks(values):
    """Doubled midranks (integers) of ``values``."""
    order = np.argsort(values, kind="mergesort")
    ranks2 = np.empty(len(values), dtype=np.int64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks2[order[i : j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks2


def _rank_sum_counts(ranks2, k):
    """ways[s] = number of k-subsets of ``ranks2`` whose doubled rank sum is s."""
    total = int(ranks2.sum())
    ways = np.zeros((k + 1, total + 1))
    ways[0, 0] = 1
    for r in ranks2:
        r = int(r)
        for j in range(k, 0, -1):
            ways[j, r:] = ways[j, r:] + ways[j - 1, : total + 1 - r]
    return ways[k]


def mann_whitney_u(a, b):
    """Two-sided Mann-Whitney U test.  Returns (U, p) with U = min(U_a, U_b).

    Exact null distribution (midranks for ties) when the smaller sample has
    at most 8 values; otherwise the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks2 = _midranks(np.concatenate([a, b]))
    r1_2 = int(ranks2[:n1].sum())
    u1_2 = r1_2 - n1 * (n1 + 1)  # doubled U of sample a
    U = min(u1_2, 2 * n1 * n2 - u1_2) / 2
    dev = abs(u1_2 - n1 * n2)
    if min(n1, n2) <= MWU_EXACT_MAX:
        k = min(n1, n2)
        counts = _rank_sum_counts(ranks2, k)
        s = np.arange(len(counts))
        u_all = s - k * (k + 1)
        extreme = np.abs(u_all - n1 * n2) >= dev
        p = float(counts[extreme].sum()) / math.comb(n1 + n2, k)
        return float(U), min(1.0, p)
    N = n1 + n2
    _, tie_counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / (N * (N - 1))
    var = n1 * n2 / 12 * ((N + 1) - tie_term)
    if var <= 0:
        return float(U), 1.0
    z = max(dev / 2 - 0.5, 0.0) / math.sqrt(var)
    return float(U), min(1.0, math.erfc(z / math.sqrt(2)))
