"""Deterministic toy pixel environments with goal sets and BFS distance oracles.

States are plain float arrays: ``[agent_x, agent_y]`` for PointRooms and
``[agent_x, agent_y, block_x, block_y]`` for PushBlock, coordinates in the
unit square with ``y`` growing downwards (row order of the rendered image).
All dynamics are vectorised over a leading batch axis.

The geometry is grid aligned: entity centres live in ``[0.02, 0.98]`` and the
interior walls block the open band ``(0.46, 0.54)`` except at doorways, so
the same rules evaluated on integer cells of pitch 0.04 give the oracle graph.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

IMAGE_SIZE = 16
EPISODE_LENGTH = 100
ACTION_REPEAT = 2
MAX_TICK = 0.06
TOLERANCE = 0.08
PITCH = 0.04
CONTACT = 0.08  # agent/block centre distance at which pushing starts
UNREACHABLE = -1

_LO, _HI = 0.02, 0.98
_BAND = (0.46, 0.54)
_DOORS = ((0.10, 0.18), (0.82, 0.90))
_N_CELLS = 25

_BACKGROUND = np.array([0.85, 0.85, 0.85], np.float32)
_WALL = np.array([0.3, 0.3, 0.3], np.float32)
_AGENT = np.array([0.9, 0.1, 0.1], np.float32)
_BLOCK = np.array([0.1, 0.8, 0.1], np.float32)


@dataclass(frozen=True)
class _Geometry:
    """Free-space description shared by float and integer-cell dynamics."""

    lo: float
    hi: float
    band: tuple | None  # open interval blocked on each axis, or None
    doors: tuple

    def in_doors(self, v):
        ok = np.zeros(np.shape(v), bool)
        for a, b in self.doors:
            ok |= (v >= a) & (v <= b)
        return ok

    def in_band(self, v):
        if self.band is None:
            return np.zeros(np.shape(v), bool)
        return (v > self.band[0]) & (v < self.band[1])

    def interval(self, along, other):
        """Free interval along one axis through ``along``, the other coordinate fixed."""
        lo = np.full(np.shape(along), self.lo, dtype=np.result_type(along, self.lo))
        hi = np.full(np.shape(along), self.hi, dtype=lo.dtype)
        if self.band is None:
            return lo, hi
        # crossing the wall perpendicular to this axis needs a doorway
        walled = ~self.in_doors(other)
        left = along <= self.band[0]
        hi = np.where(walled & left, self.band[0], hi)
        lo = np.where(walled & ~left, self.band[1], lo)
        # inside the other wall's band we are in a doorway: stay within it
        inband = self.in_band(other)
        for a, b in self.doors:
            here = inband & (along >= a) & (along <= b)
            lo = np.where(here, a, lo)
            hi = np.where(here, b, hi)
        return lo, hi

    def free(self, x, y):
        inside = (x >= self.lo) & (x <= self.hi) & (y >= self.lo) & (y <= self.hi)
        vwall = self.in_band(x) & ~self.in_doors(y)
        hwall = self.in_band(y) & ~self.in_doors(x)
        return inside & ~vwall & ~hwall


def _grid(geom: _Geometry) -> _Geometry:
    cell = lambda v: int(round((v - _LO) / PITCH))  # noqa: E731
    band = None if geom.band is None else (cell(geom.band[0]), cell(geom.band[1]))
    doors = tuple((cell(a), cell(b)) for a, b in geom.doors)
    return _Geometry(0, _N_CELLS - 1, band, doors)


def _move_axis(pos, axis: int, delta, geom: _Geometry, has_block: bool, contact):
    """Move the agent along one axis, pushing the block if it is in the way."""
    pos = pos.copy()
    other = 1 - axis
    a, a_perp = pos[:, axis], pos[:, other]
    lo, hi = geom.interval(a, a_perp)
    target = np.clip(a + delta, lo, hi)
    if has_block:
        b, b_perp = pos[:, 2 + axis], pos[:, 2 + other]
        aligned = np.abs(a_perp - b_perp) < contact
        fwd = (delta > 0) & aligned & (b > a) & (target > b - contact)
        bwd = (delta < 0) & aligned & (b < a) & (target < b + contact)
        blo, bhi = geom.interval(b, b_perp)
        nb = np.where(fwd, np.clip(target + contact, blo, bhi),
                      np.where(bwd, np.clip(target - contact, blo, bhi), b))
        target = np.where(fwd, np.minimum(target, nb - contact),
                          np.where(bwd, np.maximum(target, nb + contact), target))
        pos[:, 2 + axis] = nb
    pos[:, axis] = target
    return pos


def _tick(pos, disp, geom, has_block, contact):
    pos = _move_axis(pos, 0, disp[:, 0], geom, has_block, contact)
    return _move_axis(pos, 1, disp[:, 1], geom, has_block, contact)


def _wall_mask(geom: _Geometry) -> np.ndarray:
    sub = 8
    n = IMAGE_SIZE * sub
    c = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(c, c)  # rows index y
    if geom.band is None:
        wall = np.zeros_like(x, bool)
    else:
        # raw wall rectangles: band shrunk by the entity radius
        w0, w1 = geom.band[0] + _LO, geom.band[1] - _LO
        d = lambda v: np.any([(v >= a - _LO) & (v <= b + _LO) for a, b in geom.doors], axis=0)  # noqa: E731
        wall = (((x > w0) & (x < w1) & ~d(y)) | ((y > w0) & (y < w1) & ~d(x)))
    frac = wall.reshape(IMAGE_SIZE, sub, IMAGE_SIZE, sub).mean(axis=(1, 3))
    return frac >= 0.25


@dataclass(frozen=True)
class GoalSpec:
    id: str
    env: str
    target: np.ndarray = field(compare=False)
    entities: tuple = ("agent",)
    tolerance: float = TOLERANCE
    image: np.ndarray | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        d = {"id": self.id, "env": self.env, "entities": list(self.entities),
             "tolerance": self.tolerance, "agent": [float(v) for v in self.target[:2]]}
        if len(self.target) > 2:
            d["block"] = [float(v) for v in self.target[2:4]]
        return d


class EnvMismatch(ValueError):
    pass


class Env:
    """Shared pure-functional dynamics, rendering and oracles."""

    name = ""
    state_dim = 2
    action_dim = 2
    has_block = False

    def __init__(self, geom: _Geometry):
        self.geom = geom
        self.grid = _grid(geom)
        self._walls = _wall_mask(geom)

    # -- dynamics ---------------------------------------------------------
    def reset(self, seed: int):
        state = self.sample_state(np.random.default_rng(seed))
        return state, self.render(state)

    def sample_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action):
        nxt = self.step_batch(np.asarray(state)[None], np.asarray(action)[None])[0]
        return nxt, self.render(nxt)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        disp = np.clip(np.asarray(actions, np.float64), -1.0, 1.0) * MAX_TICK
        pos = np.asarray(states, np.float64)
        for _ in range(ACTION_REPEAT):
            pos = _tick(pos, disp, self.geom, self.has_block, CONTACT)
        return pos

    def is_free(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(states)
        ok = self.geom.free(s[:, 0], s[:, 1])
        if self.has_block:
            ok &= self.geom.free(s[:, 2], s[:, 3])
            ok &= np.max(np.abs(s[:, :2] - s[:, 2:4]), axis=1) >= CONTACT - 1e-9
        return ok

    # -- rendering --------------------------------------------------------
    def render(self, state) -> np.ndarray:
        return self.render_batch(np.asarray(state)[None])[0]

    def render_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states)
        n = len(states)
        img = np.broadcast_to(_BACKGROUND, (n, IMAGE_SIZE, IMAGE_SIZE, 3)).copy()
        img[:, self._walls] = _WALL
        idx = np.arange(n)
        if self.has_block:
            self._paint(img, idx, states[:, 2], states[:, 3], _BLOCK)
        self._paint(img, idx, states[:, 0], states[:, 1], _AGENT)
        return img

    @staticmethod
    def _paint(img, idx, x, y, color):
        col = np.clip(np.round(x * IMAGE_SIZE - 1).astype(int), 0, IMAGE_SIZE - 2)
        row = np.clip(np.round(y * IMAGE_SIZE - 1).astype(int), 0, IMAGE_SIZE - 2)
        for dr in (0, 1):
            for dc in (0, 1):
                img[idx, row + dr, col + dc] = color

    # -- goals ------------------------------------------------------------
    def success(self, state, goal: GoalSpec) -> bool:
        return bool(self.success_batch(np.asarray(state)[None], goal)[0])

    def success_batch(self, states: np.ndarray, goal: GoalSpec) -> np.ndarray:
        if goal.env != self.name:
            raise EnvMismatch(f"goal {goal.id!r} is for {goal.env!r}, not {self.name!r}")
        states = np.atleast_2d(states)
        ok = np.ones(len(states), bool)
        for ent in goal.entities:
            sl = slice(0, 2) if ent == "agent" else slice(2, 4)
            ok &= np.max(np.abs(states[:, sl] - goal.target[sl]), axis=1) <= goal.tolerance + 1e-9
        return ok

    def make_goal(self, goal_id: str, target, entities=("agent",), tolerance=TOLERANCE) -> GoalSpec:
        target = np.asarray(target, np.float64)
        return GoalSpec(goal_id, self.name, target, tuple(entities), tolerance, self.render(target))

    def benchmark_goals(self) -> list[GoalSpec]:
        return load_goals(resources.files("lexa") / "goals" / f"{self.name}.json")

    # -- oracle -----------------------------------------------------------
    def to_cells(self, state) -> np.ndarray:
        """Nearest free grid cell for each entity."""
        s = np.asarray(state, np.float64)
        out = []
        for k in range(0, len(s), 2):
            c = np.clip(np.round((s[k:k + 2] - _LO) / PITCH), 0, _N_CELLS - 1).astype(int)
            if not self.grid.free(c[0], c[1]):
                c = self._nearest_free_cell(s[k:k + 2])
            out.extend(c)
        return np.array(out, int)

    def _nearest_free_cell(self, p):
        ii, jj = np.meshgrid(np.arange(_N_CELLS), np.arange(_N_CELLS), indexing="ij")
        ok = self.grid.free(ii, jj)
        d = np.hypot(_LO + PITCH * ii - p[0], _LO + PITCH * jj - p[1])
        d[~ok] = np.inf
        k = np.unravel_index(np.argmin(d), d.shape)
        return np.array(k, int)

    def oracle_moves(self) -> np.ndarray:
        """Grid displacements reachable in one env step (up to max speed)."""
        r = int(round(ACTION_REPEAT * MAX_TICK / PITCH))
        d = np.arange(-r, r + 1)
        dx, dy = np.meshgrid(d, d, indexing="ij")
        return np.stack([dx.ravel(), dy.ravel()], axis=1)

    def _grid_step(self, cells: np.ndarray, move: np.ndarray) -> np.ndarray:
        disp = np.broadcast_to(move, (len(cells), 2))
        return _tick(cells, disp, self.grid, self.has_block, int(round(CONTACT / PITCH)))

    def _encode(self, cells: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(cells), np.int64)
        for k in range(cells.shape[1]):
            idx = idx * _N_CELLS + cells[:, k]
        return idx

    def _symmetric_adjacency(self) -> np.ndarray:
        """Cell graph keeping only moves that can also be undone in one step.

        Wall sliding makes the raw move relation directed; without a block
        the oracle uses its symmetric core so distances are reversible.
        """
        if getattr(self, "_adjacency", None) is None:
            ii, jj = np.meshgrid(np.arange(_N_CELLS), np.arange(_N_CELLS), indexing="ij")
            cells = np.stack([ii.ravel(), jj.ravel()], axis=1)
            n = len(cells)
            adj = np.zeros((n, n), bool)
            src = self._encode(cells)
            for m in self.oracle_moves():
                adj[src, self._encode(self._grid_step(cells, m))] = True
            free = self.grid.free(cells[:, 0], cells[:, 1])
            adj &= adj.T
            adj &= free[:, None] & free[None, :]
            self._adjacency = adj
        return self._adjacency

    def distance_field(self, state) -> np.ndarray:
        """BFS step counts from ``state`` to every grid state (-1 if unreachable)."""
        start = self.to_cells(state)
        if not self.has_block:
            return self._symmetric_field(start)
        dims = len(start)
        dist = np.full(_N_CELLS ** dims, -1, np.int32)
        frontier = start[None]
        dist[self._encode(frontier)] = 0
        moves = self.oracle_moves()
        d = 0
        while len(frontier):
            d += 1
            nxt = np.concatenate([self._grid_step(frontier, m) for m in moves])
            key = self._encode(nxt)
            key, first = np.unique(key, return_index=True)
            new = dist[key] < 0
            dist[key[new]] = d
            frontier = nxt[first[new]]
        return dist.reshape((_N_CELLS,) * dims)

    def _symmetric_field(self, start) -> np.ndarray:
        adj = self._symmetric_adjacency()
        dist = np.full(len(adj), -1, np.int32)
        frontier = np.zeros(len(adj), bool)
        frontier[self._encode(start[None])[0]] = True
        d = 0
        while frontier.any():
            dist[frontier] = d
            d += 1
            frontier = adj[frontier].any(axis=0) & (dist < 0)
        return dist.reshape(_N_CELLS, _N_CELLS)

    def goal_cell_mask(self, goal: GoalSpec) -> np.ndarray:
        """Boolean mask over grid states satisfying ``goal``."""
        dims = self.state_dim
        centres = _LO + PITCH * np.arange(_N_CELLS)
        mask = np.ones((_N_CELLS,) * dims, bool)
        for ent in goal.entities:
            base = 0 if ent == "agent" else 2
            for k in (0, 1):
                ok = np.abs(centres - goal.target[base + k]) <= goal.tolerance + 1e-9
                shape = [1] * dims
                shape[base + k] = _N_CELLS
                mask &= ok.reshape(shape)
        return mask

    def oracle_steps(self, state, goal: GoalSpec, field: np.ndarray | None = None) -> int:
        """Minimum env steps from ``state`` until ``goal`` succeeds on the grid."""
        if goal.env != self.name:
            raise EnvMismatch(f"goal {goal.id!r} is for {goal.env!r}, not {self.name!r}")
        if self.success(state, goal):
            return 0
        dist = self.distance_field(state) if field is None else field
        hit = dist[self.goal_cell_mask(goal) & (dist >= 0)]
        return int(hit.min()) if hit.size else UNREACHABLE


class PointRooms(Env):
    """Point agent in four rooms joined by doorways."""

    name = "pointrooms"

    def __init__(self):
        super().__init__(_Geometry(_LO, _HI, _BAND, _DOORS))

    def sample_state(self, rng):
        while True:
            p = rng.uniform(_LO, _HI, size=2)
            if self.geom.free(p[0], p[1]):
                return p

    @staticmethod
    def room_of(states) -> np.ndarray:
        s = np.atleast_2d(states)
        return (s[:, 0] > 0.5).astype(int) + 2 * (s[:, 1] > 0.5).astype(int)


class PushBlock(Env):
    """Single open room with a block the agent can push but not pull."""

    name = "pushblock"
    state_dim = 4
    has_block = True
    BLOCK_HOME = 0.5
    BLOCK_JITTER = 0.04   # block starts near the centre; goals move it away

    def __init__(self):
        super().__init__(_Geometry(_LO, _HI, None, ()))

    def sample_state(self, rng):
        block = self.BLOCK_HOME + rng.uniform(-self.BLOCK_JITTER, self.BLOCK_JITTER, size=2)
        while True:
            agent = rng.uniform(_LO, _HI, size=2)
            if np.max(np.abs(agent - block)) >= CONTACT:
                return np.concatenate([agent, block])


ENVS = {"pointrooms": PointRooms, "pushblock": PushBlock}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def load_goals(path) -> list[GoalSpec]:
    """Read a goal benchmark file and re-render the goal images."""
    with open(path) as f:
        doc = json.load(f)
    env = make_env(doc["env"])
    goals = []
    for g in doc["goals"]:
        target = list(g["agent"]) + list(g.get("block") or [])
        if env.has_block and len(target) != 4:
            raise ValueError(f"goal {g['id']!r}: {env.name} goals need a block position")
        goals.append(env.make_goal(g["id"], target, tuple(g.get("entities", ["agent"])),
                                   float(g.get("tolerance", TOLERANCE))))
    return goals


def dump_goals(path, env_name: str, goals: Sequence[GoalSpec]) -> None:
    with open(path, "w") as f:
        json.dump({"env": env_name, "goals": [g.to_json() for g in goals]}, f, indent=2)
        f.write("\n")


def bfs_steps(env: Env, start, goal: GoalSpec) -> int:
    """Reference BFS with an explicit queue and per-cell successor sets (slow, tests only)."""
    if env.success(start, goal):
        return 0
    mask = env.goal_cell_mask(goal)
    moves = env.oracle_moves()
    contact = int(round(CONTACT / PITCH))
    cache: dict = {}

    def successors(c):
        if c not in cache:
            rows = np.repeat(np.array(c)[None], len(moves), axis=0)
            nxt = _tick(rows, moves, env.grid, env.has_block, contact)
            cache[c] = {tuple(int(v) for v in r) for r in nxt}
        return cache[c]

    s0 = tuple(int(v) for v in env.to_cells(start))
    seen = {s0: 0}
    queue = deque([s0])
    while queue:
        s = queue.popleft()
        for n in sorted(successors(s)):
            if n in seen or (not env.has_block and s not in successors(n)):
                continue
            seen[n] = seen[s] + 1
            if mask[n]:
                return seen[n]
            queue.append(n)
    return UNREACHABLE
