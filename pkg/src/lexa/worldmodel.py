"""Recurrent state-space world model learned from pixels."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ndgrad import (
    MLP,
    Adam,
    Dense,
    GRUCell,
    Module,
    Tape,
    Tensor,
    backward,
    concat,
    gaussian_sample,
    kl_diag_gauss,
    maximum,
    mean,
    mul,
    no_tape,
    reshape,
    square,
    stack,
    std_from_raw,
    sub,
    sum_,
)

logger = logging.getLogger(__name__)


@dataclass
class WorldModelConfig:
    image_shape: tuple = (16, 16, 3)
    action_dim: int = 2
    deter: int = 128
    stoch: int = 32
    embed: int = 64
    enc_hidden: int = 256
    dec_hidden: int = 256
    hidden: int = 128
    beta: float = 1.0
    free_nats: float = 1.0
    lr: float = 3e-4
    clip: float = 100.0


@dataclass
class ModelState:
    """Latent state: deterministic ``h`` plus stochastic ``z`` and its statistics."""

    h: Tensor
    z: Tensor
    z_mean: Tensor
    z_std: Tensor

    def features(self) -> Tensor:
        return concat([self.h, self.z], axis=-1)

    def detach(self) -> "ModelState":
        return ModelState(self.h.detach(), self.z.detach(), self.z_mean.detach(), self.z_std.detach())

    def __len__(self) -> int:
        return self.h.shape[0]

    def index(self, idx) -> "ModelState":
        """Row selection on detached data (no tape)."""
        return ModelState(*(Tensor(t.data[idx]) for t in (self.h, self.z, self.z_mean, self.z_std)))

    @staticmethod
    def cat(states) -> "ModelState":
        return ModelState(*(Tensor(np.concatenate([getattr(s, k).data for s in states]))
                            for k in ("h", "z", "z_mean", "z_std")))


@dataclass
class WorldModelLosses:
    reconstruction_nll: float
    kl: float
    total: float


@dataclass
class SequenceBatch:
    images: np.ndarray   # B x T x H x W x C in [0, 1]
    actions: np.ndarray  # B x T x A, actions[:, t] precedes images[:, t]


class WorldModel(Module):
    def __init__(self, rng: np.random.Generator, config: WorldModelConfig | None = None):
        c = self.config = config or WorldModelConfig()
        n_pix = int(np.prod(c.image_shape))
        self.enc = MLP(rng, [n_pix, c.enc_hidden, c.embed])
        self.img_in = Dense(rng, c.stoch + c.action_dim, c.deter, act="elu")
        self.gru = GRUCell(rng, c.deter, c.deter)
        self.prior_net = MLP(rng, [c.deter, c.hidden, 2 * c.stoch])
        self.post_net = MLP(rng, [c.deter + c.embed, c.hidden, 2 * c.stoch])
        self.dec = MLP(rng, [c.deter + c.stoch, c.dec_hidden, n_pix])
        self.assign_names("wm/")
        self.opt = Adam(self.parameters(), lr=c.lr, clip=c.clip)
        self.skipped = 0

    @property
    def feature_dim(self) -> int:
        return self.config.deter + self.config.stoch

    # -- components -------------------------------------------------------
    def encode(self, images) -> Tensor:
        """Embed images of shape ``[..., H, W, C]`` into ``[N, embed]``."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        n_pix = int(np.prod(self.config.image_shape))
        if x.shape[-3:] != tuple(self.config.image_shape):
            raise ValueError(f"image shape {x.shape[-3:]} != {self.config.image_shape}")
        return self.enc(Tensor(x.reshape(-1, n_pix)))

    def initial(self, batch: int) -> ModelState:
        c = self.config
        z = Tensor(np.zeros((batch, c.stoch)))
        return ModelState(Tensor(np.zeros((batch, c.deter))), z, z, Tensor(np.ones((batch, c.stoch))))

    def _deter(self, prev: ModelState, action) -> Tensor:
        x = self.img_in(concat([prev.z, action], axis=-1))
        return self.gru(prev.h, x)

    def _stats(self, out: Tensor):
        k = self.config.stoch
        return out[:, :k], std_from_raw(out[:, k:])

    def prior(self, prev: ModelState, action, rng=None, sample: bool = True) -> ModelState:
        h = self._deter(prev, action)
        m, s = self._stats(self.prior_net(h))
        z = gaussian_sample(m, s, rng) if sample else m
        return ModelState(h, z, m, s)

    def posterior(self, prev: ModelState, action, emb, rng=None, sample: bool = True,
                  h: Tensor | None = None) -> ModelState:
        h = self._deter(prev, action) if h is None else h
        m, s = self._stats(self.post_net(concat([h, emb], axis=-1)))
        z = gaussian_sample(m, s, rng) if sample else m
        return ModelState(h, z, m, s)

    def decode(self, state: ModelState) -> Tensor:
        """Pixel means ``[N, H, W, C]``, unclamped."""
        out = self.dec(state.features())
        return reshape(out, (out.shape[0],) + tuple(self.config.image_shape))

    def render(self, state: ModelState) -> np.ndarray:
        with no_tape():
            return np.clip(self.decode(state).data, 0.0, 1.0)

    # -- sequences --------------------------------------------------------
    def observe(self, images, actions, rng, sample: bool = True):
        """Filter a batch of sequences; returns per-step posterior and prior states."""
        B, T = images.shape[:2]
        emb = self.encode(images)
        emb = reshape(emb, (B, T, self.config.embed))
        state = self.initial(B)
        posts, priors = [], []
        for t in range(T):
            act = Tensor(actions[:, t])
            h = self._deter(state, act)
            pm, ps = self._stats(self.prior_net(h))
            priors.append(ModelState(h, pm, pm, ps))
            state = self.posterior(state, act, emb[:, t], rng, sample=sample, h=h)
            posts.append(state)
        return posts, priors

    def loss(self, batch: SequenceBatch, rng):
        c = self.config
        B, T = batch.images.shape[:2]
        posts, priors = self.observe(batch.images, batch.actions, rng)
        feats = stack([s.features() for s in posts], axis=1)  # B x T x N
        recon = self.decode_features(reshape(feats, (B * T, self.feature_dim)))
        target = batch.images.reshape(B * T, -1)
        nll = mul(sum_(square(sub(recon, Tensor(target)))), 0.5 / B)
        kls = []
        for post, prior in zip(posts, priors):
            kl_t = mean(kl_diag_gauss(post.z_mean, post.z_std, prior.z_mean, prior.z_std))
            kls.append(maximum(kl_t, c.free_nats) if c.free_nats > 0 else kl_t)
        kl = sum_(stack(kls))
        total = nll + mul(kl, c.beta) if c.beta != 0 else nll
        return total, nll, kl, posts

    def decode_features(self, feats: Tensor) -> Tensor:
        return self.dec(feats)

    def observe_and_train(self, batch: SequenceBatch, rng):
        """One ELBO gradient step. Returns detached ``[B, T]`` posterior states and losses."""
        self.zero_grad()
        with Tape() as tape:
            total, nll, kl, posts = self.loss(batch, rng)
            losses = WorldModelLosses(float(nll.data), float(kl.data), float(total.data))
            if np.isfinite(losses.total):
                backward(total, tape)
                if not self.opt.step():
                    self.skipped += 1
            else:
                self.skipped += 1
                logger.warning("non-finite world-model loss; step skipped")
        states = _stack_states(posts)
        return states, losses

    def reconstruction_mse(self, images, actions, rng) -> float:
        """Per-pixel MSE of posterior reconstructions."""
        B, T = images.shape[:2]
        with no_tape():
            posts, _ = self.observe(images, actions, rng)
            feats = np.stack([s.features().data for s in posts], axis=1).reshape(B * T, -1)
            recon = self.dec(Tensor(feats)).data
        return float(np.mean((recon - images.reshape(B * T, -1)) ** 2))

    def open_loop_mse(self, images, actions, rng, context: int, horizon: int) -> float:
        """Per-pixel MSE of decoded prior predictions ``horizon`` steps past ``context``."""
        B = images.shape[0]
        with no_tape():
            posts, _ = self.observe(images[:, :context], actions[:, :context], rng)
            state = posts[-1]
            for t in range(context, context + horizon):
                state = self.prior(state, Tensor(actions[:, t]), rng)
            recon = self.dec(state.features()).data
        return float(np.mean((recon - images[:, context + horizon - 1].reshape(B, -1)) ** 2))


def _stack_states(posts) -> ModelState:
    """Detached ``[B, T, ...]`` arrays wrapped as a flat ``[B*T]`` state."""
    B, T = len(posts[0]), len(posts)
    parts = []
    for key in ("h", "z", "z_mean", "z_std"):
        arr = np.stack([getattr(s, key).data for s in posts], axis=1)
        parts.append(Tensor(arr.reshape(B * T, -1)))
    return ModelState(*parts)
