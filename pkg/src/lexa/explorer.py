"""Ensemble-disagreement exploration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .imagination import ActorCritic, ImaginationConfig
from .ndgrad import (
    Adam,
    Module,
    Parameter,
    Tape,
    Tensor,
    affine,
    backward,
    concat,
    elu,
    getitem,
    mean,
    no_tape,
    square,
    stack,
    sub,
)
from .ndgrad.nn import glorot
from .worldmodel import ModelState, WorldModel

logger = logging.getLogger(__name__)


@dataclass
class EnsembleConfig:
    heads: int = 8
    hidden: int = 200
    layers: int = 2
    lr: float = 3e-4
    clip: float = 100.0


class Ensemble(Module):
    """K one-step predictors of the next stochastic latent.

    Each layer's weights are stored stacked along a leading head axis; heads
    are initialised independently and never share entries.
    """

    def __init__(self, rng, n_in: int, n_out: int, config: EnsembleConfig | None = None):
        c = self.config = config or EnsembleConfig()
        sizes = [n_in] + [c.hidden] * c.layers + [n_out]
        self.weights = [Parameter(glorot(rng, a, b, lead=(c.heads,))) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [Parameter(np.zeros((c.heads, 1, b))) for b in sizes[1:]]
        self.assign_names("ens/")
        self.opt = Adam(self.parameters(), lr=c.lr, clip=c.clip)
        self.skipped = 0

    @property
    def heads(self) -> int:
        return self.config.heads

    def __call__(self, feat, action) -> Tensor:
        """Predictions ``[K, B, n_out]``."""
        x = concat([feat, action], axis=-1)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = affine(x, w, b)
            if i < n - 1:
                x = elu(x)
        return x

    def copy_head(self, src: int = 0) -> None:
        for p in self.parameters():
            p.data[...] = p.data[src]

    def disagreement(self, feat, action) -> Tensor:
        """Population variance across heads, averaged over output dims: ``[B]``."""
        pred = self(feat, action)
        # shifting by head 0 first keeps identical heads at exactly zero
        shifted = sub(pred, getitem(pred, slice(0, 1)))
        centred = sub(shifted, mean(shifted, axis=0, keepdims=True))
        return mean(mean(square(centred), axis=0), axis=-1)

    def train_step(self, feat: Tensor, action: Tensor, next_z: Tensor) -> float:
        """One MSE step of every head towards the detached next latent."""
        self.zero_grad()
        with Tape() as tape:
            pred = self(feat.detach(), action.detach())
            loss = mean(square(sub(pred, next_z.detach())))
            value = float(loss.data)
            if np.isfinite(value):
                backward(loss, tape)
                if not self.opt.step():
                    self.skipped += 1
            else:
                self.skipped += 1
                logger.warning("non-finite ensemble loss; step skipped")
        self.zero_grad()
        return value


def disagreement_reward(ensemble: Ensemble, feat, action) -> Tensor:
    return ensemble.disagreement(feat, action)


def ensemble_train(ensemble: Ensemble, states: ModelState, actions: np.ndarray, B: int, T: int) -> float:
    """Train on consecutive posterior states of a ``[B, T]`` batch (flattened rows)."""
    feats = states.features().data.reshape(B, T, -1)
    z = states.z.data.reshape(B, T, -1)
    # actions[:, t + 1] leads from state t to state t + 1
    x = Tensor(feats[:, :-1].reshape(B * (T - 1), -1))
    a = Tensor(actions[:, 1:].reshape(B * (T - 1), -1))
    y = Tensor(z[:, 1:].reshape(B * (T - 1), -1))
    return ensemble.train_step(x, a, y)


class Explorer:
    """Policy maximizing ensemble disagreement in imagination."""

    def __init__(self, rng, wm: WorldModel, ensemble: Ensemble, config: ImaginationConfig):
        self.wm = wm
        self.ensemble = ensemble
        self.ac = ActorCritic(rng, wm.feature_dim, wm.config.action_dim, config, "expl")

    def reward(self, roll) -> Tensor:
        return stack([self.ensemble.disagreement(s.features(), a)
                      for s, a in zip(roll.states[:-1], roll.actions)])

    def update(self, starts: ModelState, rng) -> dict:
        metrics, _ = self.ac.update(self.wm, starts, self.reward, rng, frozen=(self.ensemble,))
        return {f"expl_{k}": v for k, v in metrics.items()}

    def act(self, state: ModelState, rng, sample: bool = True) -> np.ndarray:
        with no_tape():
            return self.ac.act(state.features(), rng, sample)
