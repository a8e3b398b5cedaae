"""
Ray-maze observations
=====================

Sample a maze, print its wall grid and cast the agent's rays.
"""

import numpy as np
from first_explore.envs.raymaze import sample_maze, raymaze_reset, raymaze_step, observe, raycast

rng = np.random.default_rng(3)
maze = sample_maze(rng)
print(maze.walls.astype(int))
print("goals", maze.goal_cells, "treasure", maze.goal_values)

state = raymaze_reset(maze)
print(raycast(maze, (state.x, state.y, state.heading)))
print(observe(maze, state))

# turn left, walk, look again
for action in (1, 0, 0):
    state, obs, reward = raymaze_step(maze, state, action)
    print(action, reward, obs.round(3))
