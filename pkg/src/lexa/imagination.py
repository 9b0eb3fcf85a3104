"""Latent rollouts and the shared actor-critic trainer."""

from __future__ import annotations

import logging
from contextlib import ExitStack
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ndgrad import (
    MLP,
    Adam,
    Module,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    gaussian_entropy,
    gaussian_sample,
    mean,
    mul,
    neg,
    no_tape,
    sigmoid,
    square,
    stack,
    sub,
    tanh,
)
from .worldmodel import ModelState, WorldModel

logger = logging.getLogger(__name__)

MIN_STD, MAX_STD = 0.01, 1.0


@dataclass
class ImaginationConfig:
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95
    entropy: float = 1e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    target_interval: int = 100
    hidden: int = 128
    clip: float = 100.0


class PolicyHead(Module):
    """Gaussian policy squashed by tanh; std bounded to [0.01, 1]."""

    def __init__(self, rng, n_in: int, action_dim: int, hidden: int = 128):
        self.net = MLP(rng, [n_in, hidden, hidden, 2 * action_dim])
        self.action_dim = action_dim

    def dist(self, x):
        out = self.net(x)
        a = self.action_dim
        std = add(mul(sigmoid(out[:, a:]), MAX_STD - MIN_STD), MIN_STD)
        return out[:, :a], std

    def sample(self, x, rng):
        m, s = self.dist(x)
        return tanh(gaussian_sample(m, s, rng)), s

    def mode(self, x):
        m, _ = self.dist(x)
        return tanh(m)


class ValueHead(Module):
    def __init__(self, rng, n_in: int, hidden: int = 128):
        self.net = MLP(rng, [n_in, hidden, hidden, 1])

    def __call__(self, x) -> Tensor:
        out = self.net(x)
        return out[:, 0]


@dataclass
class ImaginedRollout:
    states: list            # H+1 ModelStates, each batch S
    actions: list           # H tensors S x A
    stds: list              # pre-squash policy stds, H tensors S x A
    goal: Tensor | None = None
    rewards: Tensor | None = None          # H x S
    values: Tensor | None = None           # (H+1) x S
    lambda_returns: Tensor | None = None   # H x S

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def features(self) -> list:
        return [s.features() for s in self.states]


def policy_input(feat: Tensor, goal: Tensor | None) -> Tensor:
    return feat if goal is None else concat([feat, goal], axis=-1)


def rollout(policy: PolicyHead, wm: WorldModel, starts: ModelState, horizon: int, rng,
            goal: Tensor | None = None) -> ImaginedRollout:
    """Imagine ``horizon`` steps from detached ``starts`` under the prior."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = starts.detach()
    states, actions, stds = [state], [], []
    for _ in range(horizon):
        action, std = policy.sample(policy_input(state.features(), goal), rng)
        state = wm.prior(state, action, rng)
        states.append(state)
        actions.append(action)
        stds.append(std)
    return ImaginedRollout(states, actions, stds, goal=goal)


def lambda_return(rewards, values, gamma: float, lam: float):
    """Backward recursion ``V_t = r_t + γ((1-λ) v_{t+1} + λ V_{t+1})``, ``V_H = v_H``.

    Accepts tensors (differentiable) or arrays; ``rewards`` is H x S and
    ``values`` (H+1) x S.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    if isinstance(rewards, Tensor) or isinstance(values, Tensor):
        H = rewards.shape[0]
        nxt = values[H]
        out = []
        for t in reversed(range(H)):
            boot = add(mul(values[t + 1], (1.0 - lam)), mul(nxt, lam))
            nxt = add(rewards[t], mul(boot, gamma))
            out.append(nxt)
        return stack(out[::-1])
    rewards = np.asarray(rewards, np.float64)
    values = np.asarray(values, np.float64)
    H = len(rewards)
    ret = np.empty_like(rewards)
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * nxt)
        ret[t] = nxt
    return ret


class ActorCritic:
    """Policy and value trained on imagined rollouts, with a hard-copied target value."""

    def __init__(self, rng, n_in: int, action_dim: int, config: ImaginationConfig, prefix: str):
        self.config = config
        self.policy = PolicyHead(rng, n_in, action_dim, config.hidden)
        self.value = ValueHead(rng, n_in, config.hidden)
        self.target = ValueHead(rng, n_in, config.hidden)
        self.target.copy_from(self.value)
        self.policy.assign_names(f"{prefix}/policy/")
        self.value.assign_names(f"{prefix}/value/")
        self.target.assign_names(f"{prefix}/target/")
        self.actor_opt = Adam(self.policy.parameters(), lr=config.actor_lr, clip=config.clip)
        self.critic_opt = Adam(self.value.parameters(), lr=config.critic_lr, clip=config.clip)
        self.critic_steps = 0
        self.skipped = 0

    def parameters(self):
        return self.policy.parameters() + self.value.parameters() + self.target.parameters()

    def update(self, wm: WorldModel, starts: ModelState, reward_fn: Callable, rng,
               goal: Tensor | None = None, frozen: Sequence[Module] = ()) -> tuple[dict, ImaginedRollout]:
        """One actor and one critic step from imagined rollouts.

        ``reward_fn(rollout)`` returns an H x S tensor differentiable through
        the rollout states and actions.
        """
        c = self.config
        self.policy.zero_grad()
        with ExitStack() as stack_, Tape() as tape:
            for mod in (wm, self.target, self.value, *frozen):
                stack_.enter_context(mod.frozen())
            roll = rollout(self.policy, wm, starts, c.horizon, rng, goal)
            roll.rewards = reward_fn(roll)
            feats = roll.features()
            roll.values = stack([self.target(policy_input(f, goal)) for f in feats])
            roll.lambda_returns = lambda_return(roll.rewards, roll.values, c.gamma, c.lam)
            ent = mean(stack([gaussian_entropy(s) for s in roll.stds]))
            actor_loss = sub(neg(mean(roll.lambda_returns)), mul(ent, c.entropy))
            actor_ok = bool(np.isfinite(actor_loss.data))
            if actor_ok:
                backward(actor_loss, tape)
                actor_ok = self.actor_opt.step()
        self.policy.zero_grad()

        # critic regresses detached inputs onto detached returns
        targets = Tensor(roll.lambda_returns.data)
        self.value.zero_grad()
        with Tape() as tape:
            inputs = [policy_input(f.detach(), goal) for f in feats[:-1]]
            pred = stack([self.value(x) for x in inputs])
            critic_loss = mean(square(sub(pred, targets)))
            critic_ok = bool(np.isfinite(critic_loss.data))
            if critic_ok:
                backward(critic_loss, tape)
                critic_ok = self.critic_opt.step()
        self.value.zero_grad()
        if critic_ok:
            self.critic_steps += 1
            if self.critic_steps % c.target_interval == 0:
                self.target.copy_from(self.value)
        if not (actor_ok and critic_ok):
            self.skipped += 1
            logger.warning("actor-critic update skipped a step (actor ok=%s, critic ok=%s)",
                           actor_ok, critic_ok)
        metrics = {
            "actor_loss": float(actor_loss.data),
            "critic_loss": float(critic_loss.data),
            "reward_mean": float(np.mean(roll.rewards.data)),
            "return_mean": float(np.mean(roll.lambda_returns.data)),
            "entropy": float(ent.data),
        }
        return metrics, roll

    def act(self, feat: Tensor, rng, sample: bool, goal: Tensor | None = None) -> np.ndarray:
        with no_tape():
            x = policy_input(feat, goal)
            a = self.policy.sample(x, rng)[0] if sample else self.policy.mode(x)
        return a.data
