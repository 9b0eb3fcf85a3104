"""Unsupervised training loop: replay, agent updates, collection, evaluation, persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .achiever import REWARD_MODES, Achiever, AchieverConfig, sample_training_goals
from .envs import EPISODE_LENGTH, ENVS, Env, GoalSpec, make_env
from .evaluation import coincidental_tracker
from .explorer import Ensemble, EnsembleConfig, Explorer, ensemble_train
from .imagination import ImaginationConfig
from .ndgrad import Tensor, load_parameters, no_tape, save_parameters
from .worldmodel import ModelState, SequenceBatch, WorldModel, WorldModelConfig

logger = logging.getLogger(__name__)

KINDS = ("random", "explorer", "achiever-practice")
EPISODE_MAGIC = b"LEXE"
EPISODE_VERSION = 1


class ConfigError(ValueError):
    """Invalid training configuration; message names the offending field."""


@dataclass
class TrainConfig:
    env: str = ""
    reward: str = "cosine"
    seed: int = 0
    total_steps: int = 200_000
    train_every: int = 5
    prefill: int = 10
    batch: int = 16
    seq_len: int = 32
    imag_starts: int = 0          # 0: every posterior state of the batch
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95
    entropy: float = 1e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    target_interval: int = 100
    policy_hidden: int = 128
    p_neg: float = 0.1
    anchors: int = 4
    train_distance: bool | None = None   # None: only in temporal mode
    wm_lr: float = 3e-4
    beta: float = 1.0
    free_nats: float = 1.0
    deter: int = 128
    stoch: int = 32
    embed: int = 64
    ens_heads: int = 8
    ens_hidden: int = 200
    ens_lr: float = 3e-4
    clip: float = 100.0
    explore_policy: str = "explorer"   # or "random"
    practice: bool = True
    eval_every: int = 5_000
    eval_episodes: int = 10
    checkpoint_every: int = 10_000

    def validate(self) -> "TrainConfig":
        for f in dataclasses.fields(self):
            value, default = getattr(self, f.name), f.default
            if f.name == "train_distance" and value is None:
                continue
            kind = type(default) if default is not None else bool
            ok = isinstance(value, kind) and (kind is bool or not isinstance(value, bool))
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                ok = True
            if not ok:
                raise ConfigError(f"field {f.name!r}: expected {kind.__name__}, got {type(value).__name__}")
        if not self.env:
            raise ConfigError("field 'env' is required")
        if self.env not in ENVS:
            raise ConfigError(f"field 'env': unknown environment {self.env!r}")
        if self.reward not in REWARD_MODES:
            raise ConfigError(f"field 'reward': must be one of {list(REWARD_MODES)}")
        if self.explore_policy not in ("explorer", "random"):
            raise ConfigError("field 'explore_policy': must be 'explorer' or 'random'")
        for name in ("total_steps", "train_every", "batch", "seq_len", "horizon", "eval_every",
                     "checkpoint_every", "target_interval", "anchors", "ens_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"field {name!r}: must be >= 1")
        if self.prefill < 1:
            raise ConfigError("field 'prefill': must be >= 1")
        if EPISODE_LENGTH % self.train_every:
            raise ConfigError(f"field 'train_every': must divide the episode length {EPISODE_LENGTH}")
        if self.seq_len > EPISODE_LENGTH + 1:
            raise ConfigError(f"field 'seq_len': at most {EPISODE_LENGTH + 1}")
        if not 0.0 <= self.p_neg <= 1.0:
            raise ConfigError("field 'p_neg': must lie in [0, 1]")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"field {name!r}: must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"field {key!r}: unknown configuration key")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def distance_enabled(self) -> bool:
        return self.reward == "temporal" if self.train_distance is None else self.train_distance

    @property
    def cycles_per_episode(self) -> int:
        return EPISODE_LENGTH // self.train_every


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    images: np.ndarray            # (L+1) x H x W x C
    actions: np.ndarray           # (L+1) x A, actions[0] = 0
    kind: str
    seed: int
    index: int
    states: np.ndarray | None = field(default=None, repr=False)  # env states, in memory only

    def __len__(self) -> int:
        return len(self.images)


def write_episode(path, ep: EpisodeRecord) -> None:
    T, H, W, C = ep.images.shape
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<IIIIIIB", EPISODE_VERSION, T, H, W, C, ep.actions.shape[1],
                            KINDS.index(ep.kind)))
        f.write(np.ascontiguousarray(ep.images, "<f4").tobytes())
        f.write(np.ascontiguousarray(ep.actions, "<f4").tobytes())


def read_episode(path, index: int = -1, seed: int = -1) -> EpisodeRecord:
    with open(path, "rb") as f:
        if f.read(4) != EPISODE_MAGIC:
            raise ValueError(f"{path}: not an episode file")
        version, T, H, W, C, A, kind = struct.unpack("<IIIIIIB", f.read(25))
        if version != EPISODE_VERSION:
            raise ValueError(f"{path}: unsupported episode version {version}")
        images = np.frombuffer(f.read(4 * T * H * W * C), "<f4").reshape(T, H, W, C)
        actions = np.frombuffer(f.read(4 * T * A), "<f4").reshape(T, A)
    return EpisodeRecord(images.astype(np.float32), actions.astype(np.float32), KINDS[kind], seed, index)


class ReplayBuffer:
    """Append-only episode store."""

    def __init__(self) -> None:
        self.episodes: list[EpisodeRecord] = []

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, ep: EpisodeRecord) -> None:
        ep.images.setflags(write=False)
        ep.actions.setflags(write=False)
        self.episodes.append(ep)

    def kinds(self) -> list[str]:
        return [ep.kind for ep in self.episodes]

    def sample(self, batch: int, length: int, rng) -> SequenceBatch:
        if not self.episodes:
            raise ValueError("replay buffer is empty")
        snapshot = list(self.episodes)
        idx = rng.integers(0, len(snapshot), size=batch)
        imgs, acts = [], []
        for i in idx:
            ep = snapshot[i]
            start = rng.integers(0, len(ep) - length + 1)
            imgs.append(ep.images[start:start + length])
            acts.append(ep.actions[start:start + length])
        return SequenceBatch(np.stack(imgs), np.stack(acts))

    def sample_frame(self, rng) -> np.ndarray:
        """A frame drawn uniformly over every stored frame."""
        sizes = np.array([len(ep) for ep in self.episodes])
        k = rng.integers(0, sizes.sum())
        e = int(np.searchsorted(np.cumsum(sizes), k, side="right"))
        return self.episodes[e].images[k - (sizes[:e].sum() if e else 0)]


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------

class Agent:
    """World model, ensemble, explorer and achiever sharing one latent space."""

    def __init__(self, config: TrainConfig, env: Env | None = None):
        self.config = c = config
        self.env = env or make_env(c.env)
        init, train, act = np.random.SeedSequence(c.seed).spawn(3)
        init_rng = np.random.default_rng(init)
        self.rng = np.random.default_rng(train)
        self.act_rng = np.random.default_rng(act)
        self.wm = WorldModel(init_rng, WorldModelConfig(
            action_dim=self.env.action_dim, deter=c.deter, stoch=c.stoch, embed=c.embed,
            beta=c.beta, free_nats=c.free_nats, lr=c.wm_lr, clip=c.clip))
        self.ensemble = Ensemble(init_rng, self.wm.feature_dim + self.env.action_dim, c.stoch,
                                 EnsembleConfig(heads=c.ens_heads, hidden=c.ens_hidden, lr=c.ens_lr,
                                                clip=c.clip))
        img = ImaginationConfig(horizon=c.horizon, gamma=c.gamma, lam=c.lam, entropy=c.entropy,
                                actor_lr=c.actor_lr, critic_lr=c.critic_lr,
                                target_interval=c.target_interval, hidden=c.policy_hidden, clip=c.clip)
        self.explorer = Explorer(init_rng, self.wm, self.ensemble, img)
        self.achiever = Achiever(init_rng, self.wm, img, AchieverConfig(
            reward=c.reward, p_neg=c.p_neg, anchors=c.anchors, clip=c.clip))

    def parameters(self):
        ps = (self.wm.parameters() + self.ensemble.parameters() + self.explorer.ac.parameters()
              + self.achiever.parameters())
        names = [p.name for p in ps]
        assert len(set(names)) == len(names), "duplicate parameter names"
        return ps

    # -- training ---------------------------------------------------------
    def update_cycle(self, replay: ReplayBuffer) -> dict:
        c = self.config
        batch = replay.sample(c.batch, c.seq_len, self.rng)
        states, losses = self.wm.observe_and_train(batch, self.rng)
        metrics = {"wm_loss": losses.total, "recon": losses.reconstruction_nll, "kl": losses.kl}
        metrics["ens_loss"] = ensemble_train(self.ensemble, states, batch.actions, c.batch, c.seq_len)
        starts = states
        if c.imag_starts and c.imag_starts < len(states):
            starts = states.index(np.sort(self.rng.choice(len(states), c.imag_starts, replace=False)))
        metrics.update(self.explorer.update(starts, self.rng))
        _, goals = sample_training_goals(batch.images, len(starts), self.rng)
        achv, roll = self.achiever.update(starts, goals, self.rng)
        metrics.update(achv)
        if c.distance_enabled:
            embeds = self.achiever.embed_goals(batch.images)
            metrics.update(self.achiever.distance_train(roll, self.rng, states, embeds))
        return metrics

    # -- acting -----------------------------------------------------------
    def filter(self, state: ModelState, prev_action: np.ndarray, images: np.ndarray,
               rng, sample: bool) -> ModelState:
        with no_tape():
            emb = self.wm.encode(images)
            return self.wm.posterior(state, Tensor(prev_action), emb, rng, sample=sample).detach()

    def collect_episode(self, kind: str, seed: int, index: int, replay: ReplayBuffer | None = None,
                        goal_image: np.ndarray | None = None) -> EpisodeRecord:
        """Run one episode; explorer and practice episodes act with sampled actions."""
        if kind not in KINDS:
            raise ValueError(f"unknown episode kind {kind!r}")
        env, rng = self.env, self.act_rng
        state, obs = env.reset(seed)
        A = env.action_dim
        images, actions, states = [obs], [np.zeros(A, np.float32)], [state]
        if kind == "achiever-practice":
            if goal_image is None:
                goal_image = replay.sample_frame(rng)
            e_g = self.achiever.embed_goals(goal_image[None])
        ms = self.wm.initial(1)
        prev = np.zeros((1, A), np.float32)
        for _ in range(EPISODE_LENGTH):
            if kind == "random":
                a = rng.uniform(-1.0, 1.0, size=A)
            else:
                ms = self.filter(ms, prev, obs[None], rng, sample=True)
                if kind == "explorer":
                    a = self.explorer.act(ms, rng, sample=True)[0]
                else:
                    a = self.achiever.act(ms, e_g, rng, sample=True)[0]
            a = np.asarray(a, np.float32)
            state, obs = env.step(state, a)
            prev = a[None]
            images.append(obs)
            actions.append(a)
            states.append(state)
        return EpisodeRecord(np.stack(images).astype(np.float32), np.stack(actions), kind, seed,
                             index, np.stack(states))

    def evaluate(self, goals: Sequence[GoalSpec], episodes_per_goal: int, seed: int = 12345,
                 goal_ids: Sequence[str] | None = None) -> dict:
        """Zero-shot goal reaching with mean actions; success at the final step."""
        if goal_ids is not None:
            known = {g.id: g for g in goals}
            missing = [g for g in goal_ids if g not in known]
            if missing:
                raise KeyError(f"unknown goal id(s): {missing}")
            goals = [known[g] for g in goal_ids]
        env = self.env
        for g in goals:
            if g.env != env.name:
                raise ValueError(f"goal {g.id!r} is for {g.env!r}, agent trains on {env.name!r}")
        n = len(goals) * episodes_per_goal
        if n == 0:
            return {"per_goal": {}, "mean": 0.0}
        starts = np.stack([env.reset(seed + e)[0] for _ in goals for e in range(episodes_per_goal)])
        goal_imgs = np.stack([g.image for g in goals for _ in range(episodes_per_goal)])
        e_g = self.achiever.embed_goals(goal_imgs)
        state = starts
        obs = env.render_batch(state)
        ms = self.wm.initial(n)
        prev = np.zeros((n, env.action_dim), np.float32)
        for _ in range(EPISODE_LENGTH):
            ms = self.filter(ms, prev, obs, None, sample=False)
            a = self.achiever.act(ms, e_g, None, sample=False)
            state = env.step_batch(state, a)
            obs = env.render_batch(state)
            prev = a.astype(np.float32)
        per_goal = {}
        for i, g in enumerate(goals):
            rows = state[i * episodes_per_goal:(i + 1) * episodes_per_goal]
            per_goal[g.id] = float(np.mean(env.success_batch(rows, g)))
        return {"per_goal": per_goal, "mean": float(np.mean(list(per_goal.values())))}

    # -- persistence ------------------------------------------------------
    def rng_states(self) -> dict:
        return {"train": self.rng.bit_generator.state, "act": self.act_rng.bit_generator.state}

    def set_rng_states(self, states: dict) -> None:
        self.rng.bit_generator.state = states["train"]
        self.act_rng.bit_generator.state = states["act"]

    def counters(self) -> dict:
        return {"expl_critic_steps": self.explorer.ac.critic_steps,
                "achv_critic_steps": self.achiever.ac.critic_steps}

    def set_counters(self, d: dict) -> None:
        self.explorer.ac.critic_steps = d["expl_critic_steps"]
        self.achiever.ac.critic_steps = d["achv_critic_steps"]

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta.update(config=self.config.to_dict(), config_hash=self.config.digest(),
                    rng=self.rng_states(), counters=self.counters())
        save_parameters(path, self.parameters(), meta)

    @classmethod
    def load(cls, path) -> tuple["Agent", dict]:
        from .ndgrad import read_checkpoint
        _, meta = read_checkpoint(path)
        agent = cls(TrainConfig.from_dict(meta["config"]))
        load_parameters(path, agent.parameters())
        agent.set_rng_states(meta["rng"])
        agent.set_counters(meta["counters"])
        return agent, meta


def episode_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def coverage_cells(states: np.ndarray, pitch: float = 0.1) -> set:
    """Distinct agent cells visited, at the given pitch."""
    cells = np.floor(np.asarray(states)[:, :2] / pitch).astype(int)
    n = int(math.ceil(1.0 / pitch))
    cells = np.clip(cells, 0, n - 1)
    return set(map(tuple, cells.tolist()))


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class Run:
    """Training run bound to a directory; resumes from its latest checkpoint."""

    def __init__(self, config: TrainConfig, outdir, goals: Sequence[GoalSpec] | None = None):
        self.config = config.validate()
        self.dir = Path(outdir)
        self.agent = Agent(config)
        self.env = self.agent.env
        self.goals = list(goals) if goals is not None else self.env.benchmark_goals()
        self.replay = ReplayBuffer()
        self.env_step = 0
        self.cycle = 0
        self.next_kind = "explorer"
        self.coincidental = {g.id: 0 for g in self.goals}
        self.visited: set = set()

    # -- files ------------------------------------------------------------
    @property
    def metrics_path(self) -> Path:
        return self.dir / "metrics.jsonl"

    def _prepare_dir(self) -> None:
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.dir / "episodes").mkdir(exist_ok=True)
        cfg_path = self.dir / "config.json"
        text = json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n"
        if cfg_path.exists() and json.loads(cfg_path.read_text()) != self.config.to_dict():
            raise ConfigError(f"{cfg_path} holds a different config; use a fresh --outdir")
        cfg_path.write_text(text)

    def _log(self, record: dict) -> None:
        clean = {k: _clean(v) for k, v in record.items()}
        with open(self.metrics_path, "a") as f:
            f.write(json.dumps(clean, sort_keys=True) + "\n")

    def latest_checkpoint(self) -> Path | None:
        ckpts = []
        for p in (self.dir / "checkpoints").glob("step_*.ckpt"):
            m = re.fullmatch(r"step_(\d+)\.ckpt", p.name)
            if m:
                ckpts.append((int(m.group(1)), p))
        return max(ckpts)[1] if ckpts else None

    def checkpoint(self) -> Path:
        path = self.dir / "checkpoints" / f"step_{self.env_step}.ckpt"
        self.agent.save(path, {
            "env_step": self.env_step, "cycle": self.cycle, "episodes": len(self.replay),
            "next_kind": self.next_kind, "coincidental": self.coincidental,
            "visited": sorted(self.visited),
        })
        return path

    def resume(self, path) -> None:
        meta = load_parameters(path, self.agent.parameters())
        if meta["config_hash"] != self.config.digest():
            raise ConfigError(f"checkpoint {path} was written with a different config")
        self.agent.set_rng_states(meta["rng"])
        self.agent.set_counters(meta["counters"])
        self.env_step = meta["env_step"]
        self.cycle = meta["cycle"]
        self.next_kind = meta["next_kind"]
        self.coincidental = dict(meta["coincidental"])
        self.visited = set(map(tuple, meta["visited"]))
        self.replay = ReplayBuffer()
        for i in range(meta["episodes"]):
            ep = read_episode(self.dir / "episodes" / f"ep_{i}.bin", i,
                              episode_seed(self.config.seed, i))
            self.replay.add(ep)
        if self.metrics_path.exists():
            keep = [line for line in self.metrics_path.read_text().splitlines()
                    if json.loads(line)["env_step"] <= self.env_step]
            self.metrics_path.write_text("".join(line + "\n" for line in keep))
        logger.info("resumed from %s at env step %d", path, self.env_step)

    # -- loop -------------------------------------------------------------
    def _add_episode(self, kind: str) -> EpisodeRecord:
        index = len(self.replay)
        goal_image = self.replay.sample_frame(self.agent.act_rng) if kind == "achiever-practice" else None
        ep = self.agent.collect_episode(kind, episode_seed(self.config.seed, index), index,
                                        self.replay, goal_image)
        write_episode(self.dir / "episodes" / f"ep_{index}.bin", ep)
        self.replay.add(ep)
        self.env_step += EPISODE_LENGTH
        if kind in ("random", "explorer"):
            for gid, hit in coincidental_tracker(ep, self.goals, self.env).items():
                self.coincidental[gid] += int(hit)
            self.visited |= coverage_cells(ep.states)
        return ep

    def prefill(self) -> None:
        for _ in range(self.config.prefill):
            self._add_episode("random")

    def _collect_kind(self) -> str:
        c = self.config
        explore = "random" if c.explore_policy == "random" else "explorer"
        if not c.practice:
            return explore
        kind = explore if self.next_kind == "explorer" else "achiever-practice"
        self.next_kind = "achiever-practice" if self.next_kind == "explorer" else "explorer"
        return kind

    def evaluate(self, episodes_per_goal: int | None = None) -> dict:
        n = self.config.eval_episodes if episodes_per_goal is None else episodes_per_goal
        return self.agent.evaluate(self.goals, n)

    def step_episode(self) -> list[dict]:
        """Collect one episode, then run its share of update cycles."""
        c = self.config
        start = self.env_step
        kind = self._collect_kind()
        self._add_episode(kind)
        records = []
        for i in range(c.cycles_per_episode):
            metrics = self.agent.update_cycle(self.replay)
            self.cycle += 1
            rec = {"env_step": start + (i + 1) * c.train_every, "cycle": self.cycle}
            rec.update(metrics)
            records.append(rec)
        last = records[-1]
        last["episode_kind"] = kind
        last["explore/cells_visited"] = len(self.visited)
        for gid, count in self.coincidental.items():
            last[f"explore/coincidental_{gid}_count"] = count
        if self.env_step // c.eval_every > start // c.eval_every:
            ev = self.evaluate()
            for gid, rate in ev["per_goal"].items():
                last[f"eval/{gid}_success"] = rate
            last["eval/mean_success"] = ev["mean"]
        for rec in records:
            self._log(rec)
        if self.env_step // c.checkpoint_every > start // c.checkpoint_every:
            self.checkpoint()
        return records

    def run(self, max_steps: int | None = None) -> Path:
        """Train until ``total_steps`` (or ``max_steps``) env steps; resumable."""
        self._prepare_dir()
        ckpt = self.latest_checkpoint()
        if ckpt is not None:
            self.resume(ckpt)
        else:
            if self.metrics_path.exists():
                self.metrics_path.unlink()
            self.prefill()
        limit = self.config.total_steps if max_steps is None else min(max_steps, self.config.total_steps)
        while self.env_step < limit:
            self.step_episode()
        if not (self.dir / "checkpoints" / f"step_{self.env_step}.ckpt").exists():
            self.checkpoint()
        return self.dir


def run(config: TrainConfig, outdir) -> Path:
    return Run(config, outdir).run()

