"""Key/door gridworld with pixel observations, behaviour policies and offline datasets.

Dataset file layout (all integers little-endian)::

    magic      4 bytes   b"SGID"
    version    u16       DATASET_VERSION
    meta_len   u32       byte length of the metadata blob
    metadata   meta_len  UTF-8 JSON (sorted keys, compact separators)
    records    repeated  fixed width, RECORD_HEADER.size + H*W bytes each:
        kind    u8   0 = transition, 1 = final frame closing an episode
        action  u8
        done    u8
        pad     u8   always 0
        reward  f32
        frame   u8[H*W]  newest frame of the observation, row-major, value/255

Each episode is its transitions in order followed by one kind-1 record holding
the frame reached after the last transition. Stacked observations are rebuilt
from the stored frames, repeating the first frame at episode start.
"""
from __future__ import annotations

import json
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GRID = 12
CELL = 3
RES = 40
OFFSET = (RES - GRID * CELL) // 2
STACK = 4
EPISODE_CAP = 200
N_ACTIONS = 5
ACTION_NAMES = ("up", "down", "left", "right", "noop")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

REWARD_KEY = 1.0
REWARD_DOOR = 5.0
REWARD_HAZARD = -1.0

# pixel intensities (u8) so that frames quantize losslessly
PIX_FLOOR = 0
PIX_WALL = 90
PIX_HAZARD = 40
PIX_DOOR = 140
PIX_KEY = 200
PIX_AGENT = 255
PIX_HELD = 200

DATASET_MAGIC = b"SGID"
DATASET_VERSION = 1
RECORD_HEADER = struct.Struct("<BBBBf")


class EnvError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


def creation_time() -> int:
    """Creation timestamp recorded in artifacts; SOURCE_DATE_EPOCH keeps it reproducible."""
    return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))


@dataclass(frozen=True)
class Layout:
    walls: frozenset
    hazards: frozenset
    key: tuple[int, int]
    door: tuple[int, int]
    start: tuple[int, int]


def _neighbours(cell):
    r, c = cell
    for dr, dc in MOVES[:4]:
        yield (r + dr, c + dc)


def bfs_path(layout: Layout, src, dst, blocked) -> list[tuple[int, int]] | None:
    """Shortest 4-connected path src -> dst avoiding ``blocked`` cells (dst itself allowed)."""
    prev = {src: None}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        if cur == dst:
            path = [cur]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for nxt in _neighbours(cur):
            if nxt in prev or (nxt in blocked and nxt != dst):
                continue
            prev[nxt] = cur
            queue.append(nxt)
    return None


def make_layout(seed: int, n_walls: int = 14, n_hazards: int = 3) -> Layout:
    """Deterministic solvable layout for a seed (rejection-sampled)."""
    rng = np.random.default_rng([seed, 0x5617])
    border = {(r, c) for r in range(GRID) for c in range(GRID) if r in (0, GRID - 1) or c in (0, GRID - 1)}
    interior = [(r, c) for r in range(1, GRID - 1) for c in range(1, GRID - 1)]
    while True:
        picks = rng.choice(len(interior), size=n_walls + n_hazards + 3, replace=False)
        cells = [interior[i] for i in picks]
        walls = frozenset(border | set(cells[:n_walls]))
        hazards = frozenset(cells[n_walls:n_walls + n_hazards])
        key, door, start = cells[n_walls + n_hazards:]
        layout = Layout(walls, hazards, key, door, start)
        blocked = walls | hazards | {door}
        to_key = bfs_path(layout, start, key, blocked)
        to_door = bfs_path(layout, key, door, walls | hazards)
        if to_key is not None and to_door is not None and len(to_key) + len(to_door) >= 12:
            return layout


def shortest_solution(layout: Layout, start=None) -> list[int]:
    """Action sequence of a shortest start -> key -> door route."""
    start = start or layout.start
    to_key = bfs_path(layout, start, layout.key, layout.walls | layout.hazards | {layout.door})
    to_door = bfs_path(layout, layout.key, layout.door, layout.walls | layout.hazards)
    if to_key is None or to_door is None:
        raise EnvError("layout has no solution from this start")
    cells = to_key + to_door[1:]
    actions = []
    for a, b in zip(cells[:-1], cells[1:]):
        actions.append(MOVES.index((b[0] - a[0], b[1] - a[1])))
    return actions



def decode_frame(frame: np.ndarray) -> tuple[tuple[int, int], bool]:
    """Recover (agent cell, key held) from a rendered frame (u8 or [0, 1] floats)."""
    f = np.asarray(frame)
    if f.dtype != np.uint8:
        f = np.rint(f * 255).astype(np.uint8)
    cells = f[OFFSET:OFFSET + GRID * CELL, OFFSET:OFFSET + GRID * CELL]
    ys, xs = np.nonzero(cells == PIX_AGENT)
    if len(ys) == 0:
        raise EnvError("no agent in frame")
    return (int(ys[0]) // CELL, int(xs[0]) // CELL), bool(f[0, 0] == PIX_HELD)


def oracle_q_values(layout: Layout) -> Callable[[np.ndarray], np.ndarray]:
    """Scripted BFS policy as a Q-function over observation batches [B, STACK, H, W].

    The returned Q-vector is one-hot on the first move of a shortest route to the
    key (or, once it is held, to the door).
    """
    def q(obs: np.ndarray) -> np.ndarray:
        out = np.zeros((len(obs), N_ACTIONS))
        for i, stack in enumerate(obs):
            pos, held = decode_frame(stack[-1])
            if held:
                path = bfs_path(layout, pos, layout.door, layout.walls | layout.hazards)
            else:
                path = bfs_path(layout, pos, layout.key, layout.walls | layout.hazards | {layout.door})
            a = N_ACTIONS - 1 if path is None or len(path) < 2 else \
                MOVES.index((path[1][0] - pos[0], path[1][1] - pos[1]))
            out[i, a] = 1.0
        return out

    return q

class GridPixEnv:
    """12x12 key/door gridworld rendered as 40x40 grayscale, 4-frame stacks.

    Dynamics are deterministic; the seed passed to :meth:`reset` fixes the layout.
    """

    n_actions = N_ACTIONS
    obs_shape = (STACK, RES, RES)

    def __init__(self, seed: int = 0, episode_cap: int = EPISODE_CAP):
        self.seed = seed
        self.episode_cap = episode_cap
        self.layout = make_layout(seed)
        self._bg = self._render_background(self.layout)
        self.pos = self.layout.start
        self.has_key = False
        self.steps = 0
        self.done = True
        self.frames: deque = deque(maxlen=STACK)

    @staticmethod
    def _render_background(layout: Layout) -> np.ndarray:
        img = np.full((RES, RES), PIX_FLOOR, dtype=np.uint8)
        for cells, pix in ((layout.walls, PIX_WALL), (layout.hazards, PIX_HAZARD), ([layout.door], PIX_DOOR)):
            for r, c in cells:
                y, x = OFFSET + r * CELL, OFFSET + c * CELL
                img[y:y + CELL, x:x + CELL] = pix
        return img

    def render(self) -> np.ndarray:
        """Current frame as u8 [40, 40]."""
        img = self._bg.copy()
        if self.has_key:
            img[:OFFSET, :] = PIX_HELD
        else:
            r, c = self.layout.key
            img[OFFSET + r * CELL:OFFSET + (r + 1) * CELL, OFFSET + c * CELL:OFFSET + (c + 1) * CELL] = PIX_KEY
        r, c = self.pos
        img[OFFSET + r * CELL:OFFSET + (r + 1) * CELL, OFFSET + c * CELL:OFFSET + (c + 1) * CELL] = PIX_AGENT
        return img

    def observation(self) -> np.ndarray:
        return np.stack(self.frames).astype(np.float32) / 255.0

    def reset(self, seed: int | None = None, start: tuple[int, int] | None = None) -> np.ndarray:
        if seed is not None and seed != self.seed:
            self.seed = seed
            self.layout = make_layout(seed)
            self._bg = self._render_background(self.layout)
        self.pos = start if start is not None else self.layout.start
        if self.pos in self.layout.walls or self.pos in self.layout.hazards or self.pos == self.layout.door:
            raise EnvError(f"start cell {self.pos} is not free")
        self.has_key = self.pos == self.layout.key
        self.steps = 0
        self.done = False
        frame = self.render()
        self.frames = deque([frame] * STACK, maxlen=STACK)
        return self.observation()

    def free_cells(self) -> list[tuple[int, int]]:
        L = self.layout
        return [
            (r, c) for r in range(GRID) for c in range(GRID)
            if (r, c) not in L.walls and (r, c) not in L.hazards and (r, c) != L.door and (r, c) != L.key
        ]

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvError("step() after episode end; call reset()")
        if not 0 <= int(action) < N_ACTIONS:
            raise IndexError(f"action {action} out of range")
        dr, dc = MOVES[int(action)]
        nxt = (self.pos[0] + dr, self.pos[1] + dc)
        reward = 0.0
        terminal = False
        L = self.layout
        if nxt in L.walls or (nxt == L.door and not self.has_key):
            nxt = self.pos
        self.pos = nxt
        if nxt in L.hazards:
            reward, terminal = REWARD_HAZARD, True
        elif nxt == L.door:
            reward, terminal = REWARD_DOOR, True
        elif nxt == L.key and not self.has_key:
            self.has_key = True
            reward = REWARD_KEY
        self.steps += 1
        self.done = terminal or self.steps >= self.episode_cap
        self.frames.append(self.render())
        return self.observation(), reward, self.done


@dataclass
class Transition:
    observation: np.ndarray
    action: int
    reward: float
    done: bool
    next_observation: np.ndarray


@dataclass
class Episode:
    frames: np.ndarray  # u8 [T+1, H, W]
    actions: np.ndarray  # u8 [T]
    rewards: np.ndarray  # f32 [T]
    dones: np.ndarray  # bool [T]

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def truncated(self) -> bool:
        return len(self) > 0 and not bool(self.dones[-1])

    def stacked(self, idx: np.ndarray | int) -> np.ndarray:
        """u8 frame stacks for observation indices 0..T."""
        idx = np.asarray(idx)
        offs = np.arange(-(STACK - 1), 1)
        sel = np.clip(idx[..., None] + offs, 0, None)
        return self.frames[sel]

    def transition(self, t: int) -> Transition:
        obs = self.stacked(t).astype(np.float32) / 255.0
        nxt = self.stacked(t + 1).astype(np.float32) / 255.0
        return Transition(obs, int(self.actions[t]), float(self.rewards[t]), bool(self.dones[t]), nxt)


class EpisodeRecorder:
    """Accumulates frames/actions/rewards for one episode."""

    def __init__(self, first_frame: np.ndarray):
        self.frames = [first_frame]
        self.actions: list[int] = []
        self.rewards: list[float] = []
        self.dones: list[bool] = []

    def add(self, action: int, reward: float, done: bool, frame: np.ndarray) -> None:
        self.actions.append(action)
        self.rewards.append(reward)
        self.dones.append(done)
        self.frames.append(frame)

    def __len__(self) -> int:
        return len(self.actions)

    def finish(self) -> Episode:
        return Episode(
            np.stack(self.frames).astype(np.uint8),
            np.asarray(self.actions, dtype=np.uint8),
            np.asarray(self.rewards, dtype=np.float32),
            np.asarray(self.dones, dtype=bool),
        )


@dataclass
class ReplayDataset:
    episodes: list[Episode]
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(len(e) for e in self.episodes)

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayDataset):
            return NotImplemented
        if self.metadata != other.metadata or len(self.episodes) != len(other.episodes):
            return False
        for a, b in zip(self.episodes, other.episodes):
            for x, y in ((a.frames, b.frames), (a.actions, b.actions), (a.rewards, b.rewards), (a.dones, b.dones)):
                if x.shape != y.shape or not np.array_equal(x, y):
                    return False
        return True

    def transitions(self):
        for ep in self.episodes:
            for t in range(len(ep)):
                yield ep.transition(t)

    def all_actions(self) -> np.ndarray:
        return np.concatenate([e.actions for e in self.episodes]).astype(np.int64)


def _finalize(episodes: list[Episode], meta: dict) -> ReplayDataset:
    meta = dict(meta)
    meta["count"] = sum(len(e) for e in episodes)
    meta["episodes"] = len(episodes)
    meta["final_truncated"] = bool(episodes and episodes[-1].truncated)
    meta.setdefault("created", creation_time())
    return ReplayDataset(episodes, meta)


def sample_geometric(rng: np.random.Generator, p: float = 1 / 3, size=None):
    """Geometric(p) on {1, 2, ...}: P(k) = (1 - p)^(k - 1) p."""
    return rng.geometric(p, size=size)


def _run_collection(env: GridPixEnv, n_transitions: int, choose: Callable[[np.ndarray, int], int],
                    reset: Callable[[], np.ndarray]) -> list[Episode]:
    episodes = []
    reset()
    rec = EpisodeRecorder(env.frames[-1])
    obs = env.observation()
    for i in range(n_transitions):
        a = choose(obs, i)
        obs, r, done = env.step(a)
        rec.add(a, r, done, env.frames[-1])
        if done:
            episodes.append(rec.finish())
            if i + 1 < n_transitions:
                obs = reset()
                rec = EpisodeRecorder(env.frames[-1])
            else:
                rec = None
    if rec is not None and len(rec):
        episodes.append(rec.finish())
    return episodes


def collect_random(env: GridPixEnv, n_transitions: int, seed: int, action_repeat: bool = True,
                   random_starts: bool = False) -> ReplayDataset:
    """Uniform-random actions, each held for Geometric(1/3) steps when ``action_repeat``.

    ``random_starts`` re-seeds the start cell every episode (wider state coverage).
    """
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    rng = np.random.default_rng(seed)
    layout_seed = env.seed
    free = env.free_cells() if random_starts else None
    state = {"action": 0, "left": 0}

    def reset():
        state["left"] = 0
        if free is not None:
            return env.reset(layout_seed, start=free[rng.integers(len(free))])
        return env.reset(layout_seed)

    def choose(obs, i):
        if not action_repeat:
            return int(rng.integers(N_ACTIONS))
        if state["left"] == 0:
            state["action"] = int(rng.integers(N_ACTIONS))
            state["left"] = int(sample_geometric(rng))
        state["left"] -= 1
        return state["action"]

    episodes = _run_collection(env, n_transitions, choose, reset)
    meta = {"policy": "random-repeat" if action_repeat else "random", "env_seed": layout_seed, "seed": seed,
            "random_starts": random_starts}
    return _finalize(episodes, meta)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``horizon`` steps, then constant."""
    start: float = 1.0
    end: float = 0.1
    horizon: int = 0

    def __call__(self, step: int) -> float:
        if self.horizon <= 0:
            return self.end
        frac = min(max(step, 0) / self.horizon, 1.0)
        return self.start + frac * (self.end - self.start)

    @classmethod
    def constant(cls, eps: float) -> EpsilonSchedule:
        return cls(eps, eps, 0)


def collect_policy(env: GridPixEnv, checkpoint, epsilon, n_transitions: int, seed: int,
                   policy_id: str | None = None) -> ReplayDataset:
    """Epsilon-greedy rollouts of a checkpoint's task Q-head.

    ``epsilon`` is a float or an :class:`EpsilonSchedule` indexed by transition count.
    """
    from .agent import AgentCheckpoint, act

    if not isinstance(checkpoint, AgentCheckpoint) or "task_head.fc0.w" not in checkpoint.network.online:
        raise DatasetFormatError("checkpoint does not carry a task Q-head")
    if checkpoint.network.cfg.encoder.in_shape != env.obs_shape:
        raise DatasetFormatError("checkpoint encoder does not match the environment observation shape")
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    sched = epsilon if isinstance(epsilon, EpsilonSchedule) else EpsilonSchedule.constant(float(epsilon))
    rng = np.random.default_rng(seed)
    layout_seed = env.seed
    net = checkpoint.network

    def choose(obs, i):
        return act(net, obs, sched(i), rng)

    episodes = _run_collection(env, n_transitions, choose, lambda: env.reset(layout_seed))
    meta = {"policy": policy_id or checkpoint.provenance.get("id", "checkpoint"), "env_seed": layout_seed,
            "seed": seed, "epsilon": [sched.start, sched.end, sched.horizon]}
    return _finalize(episodes, meta)


def build_mixed_dataset(checkpoints: Sequence, per_checkpoint: int, env: GridPixEnv, seed: int,
                        epsilon=0.1) -> ReplayDataset:
    """Concatenate equal-sized policy datasets, one segment per checkpoint."""
    if len(checkpoints) == 0:
        raise ValueError("no checkpoints given")
    if len(checkpoints) < 2:
        raise ValueError("a mixed dataset needs at least two checkpoints")
    episodes: list[Episode] = []
    segments = []
    for i, ck in enumerate(checkpoints):
        part = collect_policy(env, ck, epsilon, per_checkpoint, seed=seed * 1000 + i, policy_id=f"segment{i}")
        segments.append({
            "index": i,
            "checkpoint": ck.provenance.get("id", f"checkpoint{i}"),
            "first_episode": len(episodes),
            "episodes": len(part.episodes),
            "transitions": part.count,
        })
        episodes.extend(part.episodes)
    meta = {"policy": "mixed", "env_seed": env.seed, "seed": seed, "segments": segments}
    return _finalize(episodes, meta)


def segment_episodes(dataset: ReplayDataset, index: int) -> list[Episode]:
    seg = dataset.metadata["segments"][index]
    return dataset.episodes[seg["first_episode"]:seg["first_episode"] + seg["episodes"]]


def dataset_stats(d: ReplayDataset) -> dict:
    if d.count == 0:
        raise ValueError("empty dataset")
    clipped = [float(np.clip(e.rewards.astype(np.float64), -1.0, 1.0).sum()) for e in d.episodes]
    hist = np.bincount(d.all_actions(), minlength=N_ACTIONS)
    return {
        "avg_clipped_reward_per_episode": float(np.mean(clipped)),
        "episodes": len(d.episodes),
        "transitions": d.count,
        "action_histogram": [int(x) for x in hist],
    }


def write_dataset(d: ReplayDataset, path) -> None:
    meta = dict(d.metadata)
    meta["frame_shape"] = [RES, RES]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(blob)))
        fh.write(blob)
        for ep in d.episodes:
            for t in range(len(ep)):
                fh.write(RECORD_HEADER.pack(0, int(ep.actions[t]), int(ep.dones[t]), 0, float(ep.rewards[t])))
                fh.write(ep.frames[t].tobytes())
            fh.write(RECORD_HEADER.pack(1, 0, 0, 0, 0.0))
            fh.write(ep.frames[len(ep)].tobytes())


def read_dataset(path) -> ReplayDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off = 10
    meta = json.loads(raw[off:off + mlen].decode("utf-8"))
    off += mlen
    h, w = meta.pop("frame_shape")
    rec = RECORD_HEADER.size + h * w
    body = raw[off:]
    if len(body) % rec:
        raise DatasetFormatError("truncated record stream")
    n = len(body) // rec
    arr = np.frombuffer(body, dtype=np.uint8).reshape(n, rec)
    kinds = arr[:, 0]
    actions = arr[:, 1]
    dones = arr[:, 2].astype(bool)
    rewards = np.frombuffer(arr[:, 4:8].tobytes(), dtype="<f4")
    frames = arr[:, RECORD_HEADER.size:].reshape(n, h, w)
    episodes = []
    start = 0
    for end in np.flatnonzero(kinds == 1):
        if np.any(kinds[start:end] != 0):
            raise DatasetFormatError("malformed episode structure")
        episodes.append(Episode(frames[start:end + 1].copy(), actions[start:end].copy(),
                                rewards[start:end].astype(np.float32), dones[start:end].copy()))
        start = end + 1
    if start != n:
        raise DatasetFormatError("dataset ends inside an episode")
    d = ReplayDataset(episodes, meta)
    if meta.get("count") != d.count:
        raise DatasetFormatError("metadata count does not match stored transitions")
    return d
