"""Goal-conditioned achiever with cosine and learned temporal-distance rewards."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .imagination import ActorCritic, ImaginationConfig, ImaginedRollout
from .ndgrad import (
    MLP,
    Adam,
    Module,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    div,
    getitem,
    maximum,
    mean,
    mul,
    neg,
    no_tape,
    reshape,
    sigmoid,
    sqrt,
    square,
    stack,
    sub,
    sum_,
)
from .worldmodel import ModelState, WorldModel

logger = logging.getLogger(__name__)

REWARD_MODES = ("cosine", "temporal")


@dataclass
class AchieverConfig:
    reward: str = "cosine"
    p_neg: float = 0.1
    anchors: int = 4
    dist_hidden: int = 200
    emb_hidden: int = 200
    dist_lr: float = 3e-4
    emb_lr: float = 3e-4
    clip: float = 100.0


class DistanceNet(Module):
    """``d(e_i, e_j)`` in [0, 1] through a terminal sigmoid."""

    def __init__(self, rng, embed: int, hidden: int = 200):
        self.net = MLP(rng, [2 * embed, hidden, hidden, 1])

    def __call__(self, a, b) -> Tensor:
        return sigmoid(self.net(concat([a, b], axis=-1)))[:, 0]


class EmbeddingPredictor(Module):
    """Predicts the image embedding from latent features."""

    def __init__(self, rng, n_in: int, embed: int, hidden: int = 200):
        self.net = MLP(rng, [n_in, hidden, embed])

    def __call__(self, feat) -> Tensor:
        return self.net(feat)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine; rows with zero norm give 0."""
    na = sum_(square(a), axis=-1)
    nb = sum_(square(b), axis=-1)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        logger.warning("zero-norm latent in cosine reward; reward set to 0 for those rows")
    denom = sqrt(mul(maximum(na, 1e-12), maximum(nb, 1e-12)))
    return div(sum_(mul(a, b), axis=-1), denom)


def cosine_reward(s_t: ModelState, s_g: ModelState) -> Tensor:
    return cosine_similarity(s_t.features(), s_g.features())


def sample_training_goals(images: np.ndarray, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` goal frames uniformly from all frames of a ``[B, T, ...]`` batch.

    Returns ``(flat_indices, goal_images)``.
    """
    if images.size == 0:
        raise ValueError("cannot sample goals from an empty batch")
    B, T = images.shape[:2]
    idx = rng.integers(0, B * T, size=n)
    return idx, images.reshape((B * T,) + images.shape[2:])[idx]


@dataclass
class DistancePairs:
    t: np.ndarray
    traj: np.ndarray
    second_t: np.ndarray
    second_traj: np.ndarray
    target: np.ndarray
    negative: np.ndarray


def sample_distance_pairs(H: int, S: int, anchors: int, p_neg: float, rng) -> DistancePairs:
    """Index pairs into an imagined batch of ``S`` trajectories of ``H + 1`` states.

    Each anchor ``t`` is paired with ``t + k``, ``k`` uniform in ``[0, H - t]``
    and target ``k / H``. With probability ``p_neg`` the second element comes
    from another trajectory instead, with target 1.
    """
    n = S * anchors
    traj = np.repeat(np.arange(S), anchors)
    t = rng.integers(0, H + 1, size=n)
    k = np.floor(rng.random(n) * (H - t + 1)).astype(int)
    second_t, second_traj = t + k, traj.copy()
    target = k / H
    negative = np.zeros(n, bool)
    if p_neg > 0:
        if S < 2:
            logger.warning("single trajectory batch; negative sampling skipped")
        else:
            negative = rng.random(n) < p_neg
            shift = rng.integers(1, S, size=n)
            second_traj = np.where(negative, (traj + shift) % S, traj)
            second_t = np.where(negative, rng.integers(0, H + 1, size=n), second_t)
            target = np.where(negative, 1.0, target)
    return DistancePairs(t, traj, second_t, second_traj, target, negative)


class Achiever:
    def __init__(self, rng, wm: WorldModel, img_config: ImaginationConfig,
                 config: AchieverConfig | None = None):
        self.config = c = config or AchieverConfig()
        if c.reward not in REWARD_MODES:
            raise ValueError(f"reward mode must be one of {REWARD_MODES}, got {c.reward!r}")
        self.wm = wm
        embed = wm.config.embed
        self.ac = ActorCritic(rng, wm.feature_dim + embed, wm.config.action_dim, img_config, "achv")
        self.dist = DistanceNet(rng, embed, c.dist_hidden)
        self.emb = EmbeddingPredictor(rng, wm.feature_dim, embed, c.emb_hidden)
        self.dist.assign_names("dist/")
        self.emb.assign_names("emb/")
        self.dist_opt = Adam(self.dist.parameters(), lr=c.dist_lr, clip=c.clip)
        self.emb_opt = Adam(self.emb.parameters(), lr=c.emb_lr, clip=c.clip)
        self.skipped = 0

    def parameters(self):
        return self.ac.parameters() + self.dist.parameters() + self.emb.parameters()

    # -- goal handling ----------------------------------------------------
    def embed_goals(self, images) -> Tensor:
        with no_tape():
            return self.wm.encode(images).detach()

    def infer_goal_state(self, e_g: Tensor) -> ModelState:
        """One posterior step from the zero state with zero action, z at its mean."""
        wm = self.wm
        n = e_g.shape[0]
        with no_tape():
            s = wm.posterior(wm.initial(n), Tensor(np.zeros((n, wm.config.action_dim))),
                             e_g, sample=False)
        return s.detach()

    # -- rewards ----------------------------------------------------------
    def temporal_reward(self, s_t: ModelState, e_g: Tensor) -> Tensor:
        return neg(self.dist(self.emb(s_t.features()), e_g))

    def reward_fn(self, e_g: Tensor, s_g: ModelState | None):
        mode = self.config.reward

        def fn(roll: ImaginedRollout) -> Tensor:
            states = roll.states[1:]
            if mode == "cosine":
                return stack([cosine_reward(s, s_g) for s in states])
            return stack([self.temporal_reward(s, e_g) for s in states])

        return fn

    # -- training ---------------------------------------------------------
    def update(self, starts: ModelState, goal_images: np.ndarray, rng) -> tuple[dict, ImaginedRollout]:
        e_g = self.embed_goals(goal_images)
        s_g = self.infer_goal_state(e_g) if self.config.reward == "cosine" else None
        metrics, roll = self.ac.update(self.wm, starts, self.reward_fn(e_g, s_g), rng, goal=e_g,
                                       frozen=(self.dist, self.emb))
        return {f"achv_{k}": v for k, v in metrics.items()}, roll

    def distance_train(self, roll: ImaginedRollout, rng, replay_states: ModelState | None = None,
                       replay_embeds: Tensor | None = None, p_neg: float | None = None) -> dict:
        """Regress ``d`` onto normalised step offsets within imagined trajectories.

        Cross-trajectory negatives get the maximum distance 1. When replay
        states are given, the embedding predictor also regresses onto the
        detached encoder embeddings.
        """
        c = self.config
        p_neg = c.p_neg if p_neg is None else p_neg
        H = roll.horizon
        feats = np.stack([s.features().data for s in roll.states])  # (H+1) x S x N
        S = feats.shape[1]
        pairs = sample_distance_pairs(H, S, c.anchors, p_neg, rng)
        t, traj, second_t, second_traj = pairs.t, pairs.traj, pairs.second_t, pairs.second_traj

        self.dist.zero_grad()
        self.emb.zero_grad()
        with Tape() as tape:
            e_hat = self.emb(Tensor(feats.reshape((H + 1) * S, -1)))
            first = getitem(e_hat, t * S + traj)
            second = getitem(e_hat, second_t * S + second_traj)
            d = self.dist(first, second)
            dist_loss = mean(square(sub(d, Tensor(pairs.target))))
            loss = dist_loss
            emb_loss = None
            if replay_states is not None:
                pred = self.emb(replay_states.features().detach())
                emb_loss = mean(square(sub(pred, replay_embeds.detach())))
                loss = add(loss, emb_loss)
            ok = bool(np.isfinite(loss.data))
            if ok:
                backward(loss, tape)
                ok = self.dist_opt.step() and self.emb_opt.step()
        self.dist.zero_grad()
        self.emb.zero_grad()
        if not ok:
            self.skipped += 1
            logger.warning("distance training step skipped")
        out = {"dist_loss": float(dist_loss.data), "dist_neg_frac": float(pairs.negative.mean())}
        if emb_loss is not None:
            out["emb_loss"] = float(emb_loss.data)
        return out

    def act(self, state: ModelState, e_g: Tensor, rng, sample: bool) -> np.ndarray:
        with no_tape():
            return self.ac.act(state.features(), rng, sample, goal=e_g)

    def distance(self, e_a, e_b) -> np.ndarray:
        with no_tape():
            return self.dist(Tensor(e_a), Tensor(e_b)).data
