"""Train the latent world model on random PointRooms play and look at its predictions."""

import numpy as np

from lexa.envs import EPISODE_LENGTH, PointRooms
from lexa.orchestrator import EpisodeRecord, ReplayBuffer
from lexa.worldmodel import WorldModel, WorldModelConfig

env = PointRooms()
rng = np.random.default_rng(0)

buf = ReplayBuffer()
for i in range(40):
    s, img = env.reset(i)
    imgs, acts = [img], [np.zeros(2)]
    for _ in range(EPISODE_LENGTH):
        a = rng.uniform(-1, 1, 2)
        s, img = env.step(s, a)
        imgs.append(img)
        acts.append(a)
    buf.add(EpisodeRecord(np.stack(imgs).astype(np.float32), np.stack(acts).astype(np.float32),
                          "random", i, i))

# a half-size model so this runs in a couple of minutes
wm = WorldModel(rng, WorldModelConfig(deter=64, stoch=16, embed=32))
for step in range(401):
    _, losses = wm.observe_and_train(buf.sample(16, 32, rng), rng)
    if step % 100 == 0:
        print(f"step {step:4d}  total {losses.total:8.2f}  recon {losses.reconstruction_nll:8.2f}  kl {losses.kl:6.2f}")

batch = buf.sample(8, 40, rng)
print("posterior reconstruction MSE", wm.reconstruction_mse(batch.images, batch.actions, rng))
print("5-step open-loop MSE      ", wm.open_loop_mse(batch.images, batch.actions, rng, context=30, horizon=5))
