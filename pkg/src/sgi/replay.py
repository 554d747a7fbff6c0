"""Flat frame storage with K-step sequence sampling for pretraining and replay."""
from __future__ import annotations

import numpy as np

from .envsim import STACK, ReplayDataset
from .objectives import SequenceBatch, sample_goal_offsets


class TransitionStore:
    """Appendable store of single frames plus per-transition records.

    Frames are appended in episode order: the first frame at reset, then one per
    step. Transition i observes frame ``obs_frame[i]`` and lands on
    ``obs_frame[i] + 1``. Stacks are rebuilt by clamping to the episode start.
    """

    def __init__(self, frame_shape=(40, 40), capacity: int | None = None):
        self.frame_shape = tuple(frame_shape)
        self.capacity = capacity
        self._frames = np.zeros((1024,) + self.frame_shape, dtype=np.uint8)
        self._frame_start = np.zeros(1024, dtype=np.int64)
        self._n_frames = 0
        self._t = {k: np.zeros(1024, dtype=dt) for k, dt in
                   (("frame", np.int64), ("action", np.int64), ("reward", np.float64),
                    ("done", bool), ("episode", np.int64))}
        self._n = 0
        self.episode_end: list[int] = []  # exclusive transition index per episode
        self._open = False

    def __len__(self) -> int:
        return self._n

    def _grow(self):
        if self._n_frames >= len(self._frames):
            self._frames = np.concatenate([self._frames, np.zeros_like(self._frames)])
            self._frame_start = np.concatenate([self._frame_start, np.zeros_like(self._frame_start)])
        if self._n >= len(self._t["frame"]):
            for k, v in self._t.items():
                self._t[k] = np.concatenate([v, np.zeros_like(v)])

    def start_episode(self, frame: np.ndarray) -> None:
        self._grow()
        self._frames[self._n_frames] = frame
        self._frame_start[self._n_frames] = self._n_frames
        self._episode_first_frame = self._n_frames
        self._n_frames += 1
        self.episode_end.append(self._n)
        self._open = True

    def add(self, action: int, reward: float, done: bool, next_frame: np.ndarray) -> None:
        if not self._open:
            raise RuntimeError("add() before start_episode()")
        self._grow()
        i = self._n
        self._t["frame"][i] = self._n_frames - 1
        self._t["action"][i] = action
        self._t["reward"][i] = reward
        self._t["done"][i] = done
        self._t["episode"][i] = len(self.episode_end) - 1
        self._frames[self._n_frames] = next_frame
        self._frame_start[self._n_frames] = self._episode_first_frame
        self._n_frames += 1
        self._n += 1
        self.episode_end[-1] = self._n
        if done:
            self._open = False

    @classmethod
    def from_dataset(cls, d: ReplayDataset) -> TransitionStore:
        store = cls(d.episodes[0].frames.shape[1:] if d.episodes else (40, 40))
        for ep in d.episodes:
            store.start_episode(ep.frames[0])
            for t in range(len(ep)):
                store.add(int(ep.actions[t]), float(ep.rewards[t]), bool(ep.dones[t]), ep.frames[t + 1])
            store._open = False
        return store

    # queries

    def stacks(self, frame_idx: np.ndarray) -> np.ndarray:
        """u8 [..., STACK, H, W] for frame indices."""
        frame_idx = np.asarray(frame_idx)
        offs = np.arange(-(STACK - 1), 1)
        idx = np.maximum(frame_idx[..., None] + offs, self._frame_start[frame_idx][..., None])
        return self._frames[idx]

    def remaining(self, idx: np.ndarray) -> np.ndarray:
        """Future observations available in the episode after transition idx's observation."""
        ends = np.asarray(self.episode_end)[self._t["episode"][idx]]
        return ends - idx

    def window(self) -> int:
        """First transition index eligible for sampling (FIFO capacity)."""
        if self.capacity is None:
            return 0
        return max(0, self._n - self.capacity)

    def valid_starts(self, depth: int) -> np.ndarray:
        """Transitions whose next ``depth`` steps stay inside one episode."""
        lo = self.window()
        idx = np.arange(lo, self._n)
        return idx[self.remaining(idx) >= depth]

    def sample(self, rng: np.random.Generator, batch_size: int, depth: int, *, full_sequences: bool = True,
               goal_horizon: int | None = None, starts: np.ndarray | None = None) -> SequenceBatch:
        """Uniformly sample K-step sequences.

        With ``full_sequences`` every step lies inside the episode; otherwise any
        start is allowed and steps past the episode end are masked out.
        """
        if starts is None:
            starts = self.valid_starts(depth) if full_sequences else np.arange(self.window(), self._n)
        if len(starts) == 0:
            raise ValueError(f"no sequences of depth {depth} available")
        idx = starts[rng.integers(0, len(starts), size=batch_size)]
        rem = self.remaining(idx)
        ks = np.arange(depth)
        mask = (ks[None, :] < rem[:, None]).astype(np.float64)
        steps = np.minimum(ks[None, :], rem[:, None] - 1)
        tidx = idx[:, None] + steps
        base = self._t["frame"][idx]
        fpos = base[:, None] + np.minimum(np.arange(depth + 1)[None, :], rem[:, None])
        obs = self.stacks(fpos)
        actions = np.where(mask > 0, self._t["action"][tidx], 0)
        rewards = np.where(mask > 0, self._t["reward"][tidx], 0.0)
        dones = np.where(mask > 0, self._t["done"][tidx], False)
        goal_obs = offsets = None
        if goal_horizon is not None:
            offsets = sample_goal_offsets(rem, rng, goal_horizon)
            goal_obs = self.stacks(base + offsets)
        return SequenceBatch(obs, actions, rewards, dones, mask, goal_obs, offsets)

    def probe(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """u8 stacks of n distinct-ish observations for representation probes."""
        idx = rng.choice(self._n, size=min(n, self._n), replace=False)
        return self.stacks(self._t["frame"][np.sort(idx)])
