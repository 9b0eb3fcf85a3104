"""The two pixel environments, their goals, and the BFS distance oracle."""

import numpy as np

from lexa.envs import EPISODE_LENGTH, PointRooms, PushBlock


def ascii(img):
    """Crude text rendering: # wall, A agent, B block."""
    rows = []
    for row in img:
        line = ""
        for px in row:
            if px[0] > 0.8 and px[1] < 0.2:
                line += "A"
            elif px[1] > 0.7 and px[0] < 0.2:
                line += "B"
            elif px[0] < 0.4:
                line += "#"
            else:
                line += "."
        rows.append(line)
    return "\n".join(rows)


rooms = PointRooms()
state, img = rooms.reset(3)
print("PointRooms reset", state.round(3))
print(ascii(img))

# walk right: the wall band stops the agent unless it lines up with a doorway
s = np.array([0.25, 0.25])
for _ in range(20):
    s, _ = rooms.step(s, [1.0, 0.0])
print("blocked by wall at x =", s[0])

# goals are images of target states
for g in rooms.benchmark_goals()[:3]:
    print(g.id, g.target, "steps from reset:", rooms.oracle_steps(state, g))

push = PushBlock()
state, img = push.reset(0)
print("\nPushBlock reset", state.round(3))
print(ascii(img))
block_goal = push.benchmark_goals()[0]
print(block_goal.id, "needs", push.oracle_steps(state, block_goal), "steps")

# a random policy almost never moves the block onto a goal
rng = np.random.default_rng(0)
hits = 0
for seed in range(50):
    s, _ = push.reset(seed)
    for _ in range(EPISODE_LENGTH):
        s, _ = push.step(s, rng.uniform(-1, 1, 2))
        hits += push.success(s, block_goal)
print("random-policy steps on", block_goal.id, ":", hits)
