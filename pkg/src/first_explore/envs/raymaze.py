"""Ray maze: a procedurally carved wall maze observed through lidar rays.

Geometry.  An ``lattice x lattice`` cell maze is carved by randomized
depth-first search on a block grid of side ``2*lattice + 1`` (walls occupy
whole unit cells, so the outer ring is the enclosing boundary).  Extra loops
are opened by deleting each surviving interior wall with probability
``loop_prob``.  Coordinates are continuous; cell ``(i, j)`` covers
``[i, i+1) x [j, j+1)`` and ``walls[i, j]`` is True for solid cells.

Each of the 15 rays reports (distance to the first wall face, face
orientation, whether the ray crossed a goal cell before the wall).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import Domain, EnvBatch, EnvSpec

TURN_LEFT, FORWARD, TURN_RIGHT = 0, 1, 2

# face orientation flags: a face crossed while stepping along x runs
# north-south; a face crossed while stepping along y runs east-west
NORTH_SOUTH = 1.0
EAST_WEST = 0.0

STANDOFF = 1e-3
AXIS_EPS = 1e-12


@dataclass(frozen=True)
class RayMazeParams:
    lattice: int = 8
    fov_deg: float = 90.0
    rays: int = 15
    turn_deg: float = 30.0
    move: float = 0.5
    steps: int = 32
    episodes: int = 4
    p_treasure: float = 0.3
    goals: int = 3
    loop_prob: float = 0.15

    @property
    def headings(self) -> int | None:
        """Number of distinct headings when turn_deg divides 360, else None."""
        k = 360.0 / self.turn_deg
        return int(round(k)) if abs(k - round(k)) < 1e-9 else None

    def ray_offsets(self) -> np.ndarray:
        half = math.radians(self.fov_deg) / 2
        if self.rays == 1:
            return np.zeros(1)
        return np.linspace(-half, half, self.rays)


@dataclass(frozen=True)
class RayHit:
    distance: float
    wall_orientation: float
    goal_flag: bool


@dataclass(frozen=True)
class RayMazeEnv:
    walls: np.ndarray  # (G, G) bool
    goal_cells: np.ndarray  # (goals, 2) int
    goal_values: np.ndarray  # (goals,) in {+1, -1}
    start_pose: tuple  # (x, y, heading index)
    params: RayMazeParams = field(default_factory=RayMazeParams)

    @property
    def size(self) -> int:
        return self.walls.shape[0]

    @property
    def goal_mask(self) -> np.ndarray:
        m = np.zeros_like(self.walls)
        m[self.goal_cells[:, 0], self.goal_cells[:, 1]] = True
        return m


@dataclass(frozen=True)
class RayMazeState:
    x: float
    y: float
    heading: int
    triggered: bool = False


def heading_angle(heading: int, params: RayMazeParams) -> float:
    return heading * math.radians(params.turn_deg)


def carve_maze(rng, lattice: int, loop_prob: float) -> np.ndarray:
    G = 2 * lattice + 1
    walls = np.ones((G, G), dtype=bool)
    visited = np.zeros((lattice, lattice), dtype=bool)
    visited[0, 0] = True
    walls[1, 1] = False
    stack = [(0, 0)]
    while stack:
        cx, cy = stack[-1]
        nbrs = [
            (cx + dx, cy + dy)
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= cx + dx < lattice and 0 <= cy + dy < lattice and not visited[cx + dx, cy + dy]
        ]
        if not nbrs:
            stack.pop()
            continue
        nx, ny = nbrs[rng.integers(len(nbrs))]
        walls[cx + nx + 1, cy + ny + 1] = False
        walls[2 * nx + 1, 2 * ny + 1] = False
        visited[nx, ny] = True
        stack.append((nx, ny))
    # interior walls separating two lattice cells, in a fixed order
    candidates = [(2 * i + 2, 2 * j + 1) for i in range(lattice - 1) for j in range(lattice)]
    candidates += [(2 * i + 1, 2 * j + 2) for i in range(lattice) for j in range(lattice - 1)]
    draws = rng.random(len(candidates))
    for (wx, wy), u in zip(candidates, draws):
        if walls[wx, wy] and u < loop_prob:
            walls[wx, wy] = False
    return walls


def sample_maze(rng, params: RayMazeParams | None = None) -> RayMazeEnv:
    params = params or RayMazeParams()
    walls = carve_maze(rng, params.lattice, params.loop_prob)
    start = (1, 1)
    open_cells = np.argwhere(~walls)
    open_cells = open_cells[~((open_cells[:, 0] == start[0]) & (open_cells[:, 1] == start[1]))]
    pick = rng.choice(len(open_cells), size=params.goals, replace=False)
    goal_values = np.where(rng.random(params.goals) < params.p_treasure, 1.0, -1.0)
    return RayMazeEnv(walls, open_cells[pick], goal_values, (start[0] + 0.5, start[1] + 0.5, 0), params)


def _direction(angle):
    """Unit direction with float noise snapped to 0, so rays at multiples of
    90 degrees stay on the grid line they start on."""
    dx, dy = np.cos(angle), np.sin(angle)
    dx = np.where(np.abs(dx) < AXIS_EPS, 0.0, dx)
    dy = np.where(np.abs(dy) < AXIS_EPS, 0.0, dy)
    if np.ndim(angle) == 0:
        return float(dx), float(dy)
    return dx, dy


def raycast(maze: RayMazeEnv, pose, ray_angle_offset: float = 0.0) -> RayHit:
    """Exact grid traversal from ``pose`` to the first solid cell along the ray."""
    x, y, heading = pose
    walls = maze.walls
    ix, iy = math.floor(x), math.floor(y)
    if walls[ix, iy]:
        raise ValueError(f"pose ({x}, {y}) lies inside a wall")
    goals = {(int(a), int(b)) for a, b in maze.goal_cells}
    angle = heading_angle(heading, maze.params) + ray_angle_offset
    dx, dy = _direction(angle)
    inf = math.inf
    if dx > 0:
        step_x, t_x, d_x = 1, (ix + 1 - x) / dx, 1 / dx
    elif dx < 0:
        step_x, t_x, d_x = -1, (x - ix) / -dx, -1 / dx
    else:
        step_x, t_x, d_x = 0, inf, inf
    if dy > 0:
        step_y, t_y, d_y = 1, (iy + 1 - y) / dy, 1 / dy
    elif dy < 0:
        step_y, t_y, d_y = -1, (y - iy) / -dy, -1 / dy
    else:
        step_y, t_y, d_y = 0, inf, inf
    goal = (ix, iy) in goals
    while True:
        if t_x < t_y:
            t, ix, t_x, face = t_x, ix + step_x, t_x + d_x, NORTH_SOUTH
        else:
            t, iy, t_y, face = t_y, iy + step_y, t_y + d_y, EAST_WEST
        if walls[ix, iy]:
            return RayHit(t, face, goal)
        if (ix, iy) in goals:
            goal = True


def raycast_batch(walls, goal_mask, x, y, angles):
    """Vectorised twin of ``raycast``.

    walls, goal_mask: (B, G, G); x, y: (B,); angles: (B, R).
    Returns distance, orientation, goal flag, each (B, R).
    """
    B, R = angles.shape
    bi = np.repeat(np.arange(B), R)
    px, py = np.repeat(x, R), np.repeat(y, R)
    dx, dy = _direction(angles.ravel())
    ix, iy = np.floor(px).astype(np.int64), np.floor(py).astype(np.int64)
    if walls[bi, ix, iy].any():
        raise ValueError("pose lies inside a wall")
    with np.errstate(divide="ignore", invalid="ignore"):
        step_x = np.sign(dx).astype(np.int64)
        step_y = np.sign(dy).astype(np.int64)
        t_x = np.where(dx > 0, (ix + 1 - px) / dx, np.where(dx < 0, (px - ix) / -dx, np.inf))
        t_y = np.where(dy > 0, (iy + 1 - py) / dy, np.where(dy < 0, (py - iy) / -dy, np.inf))
        d_x = np.where(dx != 0, np.abs(1 / dx), np.inf)
        d_y = np.where(dy != 0, np.abs(1 / dy), np.inf)
    goal = goal_mask[bi, ix, iy].copy()
    dist = np.zeros(B * R)
    face = np.zeros(B * R)
    active = np.arange(B * R)
    while active.size:
        use_x = t_x[active] < t_y[active]
        ax, ay = active[use_x], active[~use_x]
        dist[ax], face[ax] = t_x[ax], NORTH_SOUTH
        ix[ax] += step_x[ax]
        t_x[ax] += d_x[ax]
        dist[ay], face[ay] = t_y[ay], EAST_WEST
        iy[ay] += step_y[ay]
        t_y[ay] += d_y[ay]
        hit = walls[bi[active], ix[active], iy[active]]
        goal[active[~hit]] |= goal_mask[bi[active[~hit]], ix[active[~hit]], iy[active[~hit]]]
        active = active[~hit]
    return dist.reshape(B, R), face.reshape(B, R), goal.reshape(B, R).astype(np.float64)


def observe(maze: RayMazeEnv, state: RayMazeState) -> np.ndarray:
    pose = (state.x, state.y, state.heading)
    out = []
    for off in maze.params.ray_offsets():
        hit = raycast(maze, pose, off)
        out += [hit.distance, hit.wall_orientation, float(hit.goal_flag)]
    return np.array(out)


def _turn(heading: int, delta: int, params: RayMazeParams) -> int:
    k = params.headings
    return (heading + delta) % k if k else heading + delta


def raymaze_reset(maze: RayMazeEnv) -> RayMazeState:
    x, y, h = maze.start_pose
    return RayMazeState(x, y, h, False)


def raymaze_step(maze: RayMazeEnv, state: RayMazeState, action: int):
    """Apply one action; returns (state', 45-dim observation, reward)."""
    p = maze.params
    x, y, heading = state.x, state.y, state.heading
    if action == TURN_LEFT:
        heading = _turn(heading, 1, p)
    elif action == TURN_RIGHT:
        heading = _turn(heading, -1, p)
    elif action == FORWARD:
        free = raycast(maze, (x, y, heading)).distance
        dist = min(p.move, max(free - STANDOFF, 0.0))
        a = heading_angle(heading, p)
        nx, ny = x + dist * math.cos(a), y + dist * math.sin(a)
        if maze.walls[math.floor(nx), math.floor(ny)]:
            # landed exactly on a corner shared with a wall cell: back off
            dist = max(dist - STANDOFF, 0.0)
            nx, ny = x + dist * math.cos(a), y + dist * math.sin(a)
            if maze.walls[math.floor(nx), math.floor(ny)]:
                nx, ny = x, y
        x, y = nx, ny
    else:
        raise IndexError(f"action {action} outside 0..2")
    reward = 0.0
    triggered = state.triggered
    if not triggered:
        cell = (math.floor(x), math.floor(y))
        for (gx, gy), v in zip(maze.goal_cells, maze.goal_values):
            if (gx, gy) == cell:
                reward, triggered = float(v), True
                break
    new = RayMazeState(x, y, heading, triggered)
    return new, observe(maze, new), reward


class RayMazeBatch(EnvBatch):
    def __init__(self, domain, envs):
        super().__init__(domain, envs)
        p = domain.maze_params
        self.walls = np.stack([e.walls for e in self.envs])
        self.goal_mask = np.stack([e.goal_mask for e in self.envs])
        self.goal_value_grid = np.zeros(self.walls.shape)
        for b, e in enumerate(self.envs):
            self.goal_value_grid[b, e.goal_cells[:, 0], e.goal_cells[:, 1]] = e.goal_values
        self.offsets = p.ray_offsets()
        self.turn = math.radians(p.turn_deg)
        self.start = np.array([e.start_pose for e in self.envs], dtype=np.float64)

    def _observe(self, x, y, heading):
        angles = (heading * self.turn)[:, None] + self.offsets[None, :]
        d, o, g = raycast_batch(self.walls, self.goal_mask, x, y, angles)
        return np.stack([d, o, g], axis=-1).reshape(len(self), -1)

    def reset(self):
        x, y = self.start[:, 0].copy(), self.start[:, 1].copy()
        heading = self.start[:, 2].astype(np.int64)
        triggered = np.zeros(len(self), dtype=bool)
        return (x, y, heading, triggered), self._observe(x, y, heading)

    def step(self, state, actions, rng):
        p = self.domain.maze_params
        x, y, heading, triggered = state
        k = p.headings
        heading = heading + (actions == TURN_LEFT) - (actions == TURN_RIGHT)
        if k:
            heading = heading % k
        fwd = actions == FORWARD
        x, y = x.copy(), y.copy()
        if fwd.any():
            idx = np.flatnonzero(fwd)
            angle = heading[idx] * self.turn
            free, _, _ = raycast_batch(self.walls[idx], self.goal_mask[idx], x[idx], y[idx], angle[:, None])
            dist = np.minimum(p.move, np.maximum(free[:, 0] - STANDOFF, 0.0))
            nx, ny = x[idx] + dist * np.cos(angle), y[idx] + dist * np.sin(angle)
            corner = self.walls[idx, np.floor(nx).astype(np.int64), np.floor(ny).astype(np.int64)]
            if corner.any():
                dist = np.where(corner, np.maximum(dist - STANDOFF, 0.0), dist)
                nx, ny = x[idx] + dist * np.cos(angle), y[idx] + dist * np.sin(angle)
                stuck = self.walls[idx, np.floor(nx).astype(np.int64), np.floor(ny).astype(np.int64)]
                nx, ny = np.where(stuck, x[idx], nx), np.where(stuck, y[idx], ny)
            x[idx], y[idx] = nx, ny
        b = np.arange(len(self))
        cx, cy = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        fire = self.goal_mask[b, cx, cy] & ~triggered
        rewards = np.where(fire, self.goal_value_grid[b, cx, cy], 0.0)
        triggered = triggered | fire
        return (x, y, heading, triggered), self._observe(x, y, heading), rewards


class RayMazeDomain(Domain):
    name = "raymaze"
    uses_reset = True

    def __init__(self, **params):
        self.maze_params = RayMazeParams(**params)
        p = self.maze_params
        self.spec = EnvSpec(f"maze{p.lattice}x{p.lattice}", 3, 3 * p.rays, p.steps, p.episodes)

    def sample_envs(self, rng, count):
        return [sample_maze(rng, self.maze_params) for _ in range(count)]

    def batch(self, envs):
        return RayMazeBatch(self, envs)

    def params(self):
        p = self.maze_params
        return {k: getattr(p, k) for k in p.__dataclass_fields__}
