"""Dark treasure rooms: a blind 9x9 grid with consumable treasures and traps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Domain, EnvBatch, EnvSpec

STAY, NORTH, EAST, SOUTH, WEST = range(5)
MOVES = np.array([[0, 0], [0, 1], [1, 0], [0, -1], [-1, 0]], dtype=np.int64)


@dataclass(frozen=True)
class DarkRoomEnv:
    positions: np.ndarray  # (objects, 2) int cells
    values: np.ndarray  # (objects,)
    rho: float
    size: int = 9

    @property
    def start(self):
        c = self.size // 2
        return (c, c)


@dataclass(frozen=True)
class DarkRoomState:
    agent_pos: tuple
    consumed: tuple  # per-object flags


def sample_darkroom(rng, rho: float, objects: int = 8, size: int = 9) -> DarkRoomEnv:
    if rho > 2:
        raise ValueError(f"rho must be <= 2, got {rho}")
    positions = rng.integers(0, size, size=(objects, 2))
    values = rng.uniform(rho, 2.0, size=objects)
    return DarkRoomEnv(positions, values, float(rho), size)


def darkroom_reset(env: DarkRoomEnv) -> DarkRoomState:
    return DarkRoomState(env.start, (False,) * len(env.values))


def darkroom_step(env: DarkRoomEnv, state: DarkRoomState, action: int):
    """Move (clamped to the grid), then collect every unconsumed object on the new cell."""
    if not 0 <= action < len(MOVES):
        raise IndexError(f"action {action} outside 0..4")
    x = min(max(state.agent_pos[0] + MOVES[action][0], 0), env.size - 1)
    y = min(max(state.agent_pos[1] + MOVES[action][1], 0), env.size - 1)
    consumed = list(state.consumed)
    reward = 0.0
    for i, (px, py) in enumerate(env.positions):
        if not consumed[i] and px == x and py == y:
            reward += float(env.values[i])
            consumed[i] = True
    return DarkRoomState((int(x), int(y)), tuple(consumed)), np.array([x, y], dtype=np.float64), reward


class DarkRoomBatch(EnvBatch):
    def __init__(self, domain, envs):
        super().__init__(domain, envs)
        self.positions = np.stack([e.positions for e in self.envs])  # (B, K, 2)
        self.values = np.stack([e.values for e in self.envs])  # (B, K)

    def reset(self):
        B = len(self)
        c = self.domain.size // 2
        pos = np.full((B, 2), c, dtype=np.int64)
        consumed = np.zeros(self.values.shape, dtype=bool)
        return (pos, consumed), pos.astype(np.float64)

    def step(self, state, actions, rng):
        pos, consumed = state
        pos = np.clip(pos + MOVES[actions], 0, self.domain.size - 1)
        hit = (self.positions == pos[:, None, :]).all(axis=-1) & ~consumed
        rewards = (self.values * hit).sum(axis=1)
        return (pos, consumed | hit), pos.astype(np.float64), rewards


class DarkRoomDomain(Domain):
    name = "darkroom"
    uses_reset = True

    def __init__(self, rho: float = -4.0, episodes: int = 10, steps: int = 9, objects: int = 8, size: int = 9):
        if rho > 2:
            raise ValueError(f"rho must be <= 2, got {rho}")
        self.rho = float(rho)
        self.objects = int(objects)
        self.size = int(size)
        self.spec = EnvSpec(f"grid{size}x{size}", 5, 2, int(steps), int(episodes))

    def sample_envs(self, rng, count):
        return [sample_darkroom(rng, self.rho, self.objects, self.size) for _ in range(count)]

    def batch(self, envs):
        return DarkRoomBatch(self, envs)

    def params(self):
        return {
            "rho": self.rho,
            "episodes": self.spec.episodes,
            "steps": self.spec.episode_length,
            "objects": self.objects,
            "size": self.size,
        }
