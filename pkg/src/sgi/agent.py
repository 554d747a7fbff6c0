"""Offline pretraining and online DQN finetuning loops."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from . import nets
from . import objectives as obj
from .diffcore import AdamState, ParamGroup, Tensor
from .envsim import EPISODE_CAP, EpsilonSchedule, GridPixEnv
from .evalstats import collapse_metric
from .nets import AugmentConfig, Network, NetConfig
from .replay import TransitionStore

SCHEMES = ("reduced", "naive", "frozen")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class AgentCheckpoint:
    network: Network
    provenance: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.network.cfg.fingerprint()

    @property
    def pretrained_blocks(self) -> list[str]:
        return list(self.provenance.get("trained_blocks", []))


def config_hash(cfg) -> str:
    blob = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(x):
    if hasattr(x, "to_dict"):
        return x.to_dict()
    if hasattr(x, "__dataclass_fields__"):
        return {k: _plain(getattr(x, k)) for k in x.__dataclass_fields__}
    if isinstance(x, (frozenset, set)):
        return sorted(_plain(v) for v in x)
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    return x


@dataclass(frozen=True)
class PretrainConfig:
    epochs: float = 10
    batch_size: int = 256
    depth: int = 5
    tau: float = 0.99
    lr: float = 3e-4
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    objectives: frozenset = frozenset({"S", "G", "I"})
    gamma: float = 0.99
    seed: int = 0
    steps: int | None = None  # overrides epochs when set
    log_every: int = 50
    probe_size: int = 256
    collapse_on_projection: bool = True
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    goals: obj.GoalConfig = field(default_factory=obj.GoalConfig)

    def __post_init__(self):
        object.__setattr__(self, "objectives", obj.parse_mask(self.objectives))
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.depth < 1:
            raise ValueError("prediction depth must be at least 1")

    def total_steps(self, n_transitions: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return max(1, int(round(self.epochs * n_transitions / self.batch_size)))


@dataclass(frozen=True)
class FinetuneConfig:
    budget: int = 15_000
    env_seed: int = 0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_fraction: float = 0.2
    replay_capacity: int = 100_000
    warmup: int = 1000
    update_every: int = 1
    batch_size: int = 32
    depth: int = 5
    lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.99
    target_update_period: int = 1
    ssl_objectives: frozenset = frozenset({"S"})
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    scheme: str = "reduced"
    double_dqn: bool = True
    seed: int = 0
    eval_episodes: int = 100
    eval_epsilon: float = 0.001
    snapshot_every: int | None = None
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    goals: obj.GoalConfig = field(default_factory=obj.GoalConfig)

    def __post_init__(self):
        ssl = frozenset() if not self.ssl_objectives else obj.parse_mask(self.ssl_objectives)
        object.__setattr__(self, "ssl_objectives", ssl)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown finetune scheme {self.scheme!r}")
        if self.budget <= self.warmup:
            raise ValueError("budget must exceed warmup")

    def epsilon_schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.epsilon_start, self.epsilon_end, int(self.epsilon_fraction * self.budget))


# acting and evaluation


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest index."""
    return np.argmax(q, axis=-1)


def act(net: Network, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action for a single observation."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(net.cfg.n_actions))
    with dc.no_grad():
        q = nets.q_values(net, np.asarray(obs, dtype=net.dtype)[None]).data[0]
    return int(greedy(q))


def evaluate_agent(policy, env: GridPixEnv, n_episodes: int = 100, seed: int = 0,
                   epsilon: float = 0.001) -> tuple[float, list[float]]:
    """Mean and per-episode raw returns of near-greedy rollouts on fresh env copies.

    ``policy`` is a Network or a callable mapping an observation batch to Q-values.
    Episodes run in lockstep so Q-values are computed in batches.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(policy, Network):
        net = policy

        def qfn(obs):
            with dc.no_grad():
                return nets.q_values(net, obs.astype(net.dtype)).data
    else:
        qfn = policy
    envs = [GridPixEnv(env.seed, env.episode_cap) for _ in range(n_episodes)]
    rngs = [np.random.default_rng([seed, i]) for i in range(n_episodes)]
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(n_episodes)
    live = np.ones(n_episodes, dtype=bool)
    while live.any():
        ids = np.flatnonzero(live)
        q = np.asarray(qfn(obs[ids]))
        for j, i in enumerate(ids):
            if rngs[i].random() < epsilon:
                a = int(rngs[i].integers(env.n_actions))
            else:
                a = int(greedy(q[j]))
            o, r, done = envs[i].step(a)
            obs[i] = o
            returns[i] += r
            if done:
                live[i] = False
    return float(returns.mean()), [float(r) for r in returns]


# losses used in finetuning


def dqn_loss(net: Network, obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray, next_obs: np.ndarray,
             dones: np.ndarray, gamma: float = 0.99, double: bool = True, z: Tensor | None = None,
             z_next_target: np.ndarray | None = None) -> Tensor:
    """Mean squared TD error of the task head; terminal steps drop the bootstrap.

    With ``double`` the online network picks the next action and the target evaluates it.
    """
    if z is None:
        z = nets.encode(net, np.asarray(obs, dtype=net.dtype))
    with dc.no_grad():
        if z_next_target is None:
            z_next_target = nets.encode(net, np.asarray(next_obs, dtype=net.dtype), target=True).data
        q_next_t = nets.q_head(net, Tensor(np.asarray(z_next_target, dtype=net.dtype)), target=True).data
        if double:
            a_star = greedy(nets.q_values(net, np.asarray(next_obs, dtype=net.dtype)).data)
            bootstrap = q_next_t[np.arange(len(a_star)), a_star]
        else:
            bootstrap = q_next_t.max(axis=1)
    targets = obj.td_targets(np.asarray(rewards, dtype=np.float64), np.asarray(dones), bootstrap, gamma)
    return obj.squared_td_loss(nets.q_head(net, z), actions, targets)


def finetune_scales(scheme: str, blocks: Sequence[str], pretrained: Iterable[str]) -> dict[str, float]:
    """Learning-rate multiplier per parameter block for a finetuning scheme."""
    pretrained = set(pretrained)
    scales = {}
    for b in blocks:
        if scheme == "naive" or b not in pretrained:
            scales[b] = 1.0
        elif scheme == "frozen":
            scales[b] = 0.0 if b == "encoder" else 1.0
        elif b in ("encoder", "transition"):
            scales[b] = 0.01
        else:
            scales[b] = 1.0 / 3.0
    return scales


# training loops


def _augmented(obs_u8: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, dtype) -> np.ndarray:
    shape = obs_u8.shape
    flat = obs_u8.reshape((-1,) + shape[-3:]).astype(dtype) / dtype(255)
    return nets.augment(flat, cfg, rng).reshape(shape)


def _ssl_step_inputs(net, store_batch, cfg_aug, goal_cfg, use_goals, rng):
    dtype = net.dtype.type
    obs = _augmented(store_batch.obs, cfg_aug, rng, dtype)
    goals = None
    if use_goals:
        gobs = _augmented(store_batch.goal_obs, cfg_aug, rng, dtype)
        with dc.no_grad():
            hz = nets.encode(net, gobs, target=True).data
        goals = obj.make_goals(hz, store_batch.goal_offsets, rng, goal_cfg)
    batch = obj.SequenceBatch(obs, store_batch.actions, store_batch.rewards, store_batch.dones, store_batch.mask,
                              None, store_batch.goal_offsets)
    return batch, goals


def pretrain(dataset, cfg: PretrainConfig, progress: Callable[[dict], None] | None = None,
             dtype=np.float32) -> tuple[AgentCheckpoint, list[dict]]:
    """Jointly optimise the enabled self-supervised objectives on an offline dataset."""
    store = TransitionStore.from_dataset(dataset)
    starts = store.valid_starts(cfg.depth)
    if len(starts) == 0:
        raise ValueError(f"dataset has no episode segment long enough for depth {cfg.depth}")
    net = Network.init(cfg.net, seed=cfg.seed, dtype=dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    blocks = obj.used_blocks(cfg.objectives, cfg.weights, cfg.depth)
    groups = [ParamGroup(b, net.block(b), 1.0) for b in blocks]
    adam = AdamState(lr=cfg.lr)
    probe = store.probe(np.random.default_rng([cfg.seed, 2]), cfg.probe_size).astype(dtype) / dtype(255)
    use_goals = "G" in obj.active_terms(cfg.objectives, cfg.weights)
    total = cfg.total_steps(len(store))
    chash = config_hash(cfg)
    log: list[dict] = []
    for step in range(1, total + 1):
        raw = store.sample(rng, cfg.batch_size, cfg.depth, goal_horizon=cfg.goals.horizon if use_goals else None,
                           starts=starts)
        batch, goals = _ssl_step_inputs(net, raw, cfg.augment, cfg.goals, use_goals, rng)
        loss, parts = obj.pretrain_loss(net, batch, goals, cfg.weights, cfg.objectives, cfg.gamma, cfg.goals)
        loss.backward()
        dc.adam_step(groups, adam)
        nets.ema_update(net, cfg.tau)
        if step % cfg.log_every == 0 or step == total:
            with dc.no_grad():
                reps = nets.collapse_vectors(net, probe, cfg.collapse_on_projection)
            rec = {"phase": "pretrain", "step": step, "config": chash, **parts,
                   "collapse": collapse_metric(reps, on_zero="zero")}
            log.append(rec)
            if progress:
                progress(rec)
    prov = {
        "pretrained": True,
        "objectives": obj.mask_label(cfg.objectives),
        "trained_blocks": blocks,
        "dataset": dataset.metadata.get("policy", "unknown"),
        "dataset_count": dataset.count,
        "steps": total,
        "seed": cfg.seed,
        "config": chash,
    }
    return AgentCheckpoint(net, prov), log


@dataclass
class FinetuneResult:
    network: Network
    episode_returns: list[float]
    log: list[dict]
    groups: list[ParamGroup]
    snapshots: list[AgentCheckpoint] = field(default_factory=list)
    eval_mean: float | None = None
    eval_returns: list[float] | None = None


def finetune(env: GridPixEnv, checkpoint: AgentCheckpoint | None, cfg: FinetuneConfig, force: bool = False,
             progress: Callable[[dict], None] | None = None, evaluate: bool = True,
             dtype=np.float32) -> FinetuneResult:
    """Epsilon-greedy DQN on the environment, optionally from a pretrained checkpoint."""
    if checkpoint is not None:
        net_cfg = checkpoint.network.cfg
        if net_cfg.encoder.in_shape != env.obs_shape:
            raise CheckpointFormatError("checkpoint encoder input does not match the environment")
        if checkpoint.fingerprint != cfg.net.fingerprint() and not force:
            raise CheckpointFormatError("checkpoint architecture fingerprint differs from the config")
        net = checkpoint.network.astype(dtype)
        pretrained = checkpoint.pretrained_blocks
    else:
        net = Network.init(cfg.net, seed=cfg.seed, dtype=dtype)
        pretrained = []
    rng = np.random.default_rng([cfg.seed, 3])
    ssl_terms = obj.active_terms(cfg.ssl_objectives, cfg.weights) if cfg.ssl_objectives else []
    blocks = sorted(set(["encoder", "task_head"]) | set(obj.used_blocks(ssl_terms, cfg.weights, cfg.depth)),
                    key=nets.BLOCKS.index) if ssl_terms else ["encoder", "task_head"]
    scales = finetune_scales(cfg.scheme, blocks, pretrained)
    groups = [ParamGroup(b, net.block(b), scales[b]) for b in blocks]
    adam = AdamState(lr=cfg.lr)
    sched = cfg.epsilon_schedule()
    use_goals = "G" in ssl_terms
    store = TransitionStore(capacity=cfg.replay_capacity)
    chash = config_hash(cfg)
    log: list[dict] = []
    returns: list[float] = []
    snapshots: list[AgentCheckpoint] = []
    obs = env.reset(cfg.env_seed)
    store.start_episode(env.frames[-1])
    ep_ret = 0.0
    updates = 0
    for step in range(cfg.budget):
        a = act(net, obs, sched(step), rng)
        obs, r, done = env.step(a)
        store.add(a, r, done, env.frames[-1])
        ep_ret += r
        if done:
            returns.append(ep_ret)
            log.append({"phase": "finetune", "step": step + 1, "config": chash, "episode_return": ep_ret})
            if progress:
                progress(log[-1])
            ep_ret = 0.0
            obs = env.reset(cfg.env_seed)
            store.start_episode(env.frames[-1])
        if step >= cfg.warmup and step % cfg.update_every == 0:
            parts = _finetune_update(net, store, cfg, ssl_terms, use_goals, groups, adam, rng)
            updates += 1
            if updates % cfg.target_update_period == 0:
                nets.ema_update(net, cfg.tau)
            if updates % 250 == 0:
                log.append({"phase": "finetune", "step": step + 1, "config": chash, "update": updates, **parts})
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snapshots.append(AgentCheckpoint(net.copy(), {"id": f"seed{cfg.seed}-step{step + 1}",
                                                          "pretrained": False, "trained_blocks": [],
                                                          "config": chash}))
    result = FinetuneResult(net, returns, log, groups, snapshots)
    if evaluate:
        mean, per = evaluate_agent(net, GridPixEnv(cfg.env_seed, env.episode_cap), cfg.eval_episodes,
                                   seed=cfg.seed, epsilon=cfg.eval_epsilon)
        result.eval_mean, result.eval_returns = mean, per
        log.append({"phase": "eval", "config": chash, "mean_return": mean, "returns": per})
    return result


def _finetune_update(net, store, cfg: FinetuneConfig, ssl_terms, use_goals, groups, adam, rng) -> dict:
    raw = store.sample(rng, cfg.batch_size, cfg.depth, full_sequences=False,
                       goal_horizon=cfg.goals.horizon if use_goals else None)
    batch, goals = _ssl_step_inputs(net, raw, cfg.augment, cfg.goals, use_goals, rng)
    obs = batch.obs
    B, K = batch.actions.shape
    z0 = nets.encode(net, obs[:, 0])
    n_future = K if ("S" in ssl_terms or "I" in ssl_terms) else 1
    with dc.no_grad():
        z_future = obj._target_latents(net, obs[:, 1:1 + n_future])
    loss = dqn_loss(net, obs[:, 0], batch.actions[:, 0], batch.rewards[:, 0], obs[:, 1], batch.dones[:, 0],
                    cfg.gamma, cfg.double_dqn, z=z0, z_next_target=z_future[:, 0])
    parts = {"dqn": loss.item()}
    if ssl_terms:
        ssl, extra = obj.pretrain_loss(net, batch, goals, cfg.weights, ssl_terms, cfg.gamma, cfg.goals,
                                       z0=z0, z_future_target=z_future if n_future == K else None)
        parts.update(extra)
        loss = loss + ssl
    loss.backward()
    dc.adam_step(groups, adam)
    return parts
