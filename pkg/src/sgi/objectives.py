"""Pretraining losses: latent self-prediction, goal-conditioned Q-learning, inverse
dynamics, behavioural cloning, plus hindsight goal sampling and the goal reward."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import diffcore as dc
from . import nets
from .diffcore import ContractError, DimensionError, Tensor
from .nets import Network

OBJECTIVES = ("S", "G", "I", "BC")


def parse_mask(spec) -> frozenset[str]:
    """'S,G,I' / 'SGI' / iterable -> validated objective set."""
    if isinstance(spec, str):
        s = spec.replace(" ", "").upper()
        parts = [p for p in s.split(",") if p] if "," in s else _split_letters(s)
    else:
        parts = [str(p).upper() for p in spec]
    mask = frozenset(parts)
    unknown = mask - set(OBJECTIVES)
    if unknown:
        raise ValueError(f"unknown objectives {sorted(unknown)}")
    if not mask:
        raise ValueError("at least one objective must be enabled")
    return mask


def _split_letters(s: str) -> list[str]:
    out, i = [], 0
    while i < len(s):
        if s.startswith("BC", i):
            out.append("BC")
            i += 2
        else:
            out.append(s[i])
            i += 1
    return out


def mask_label(mask: Iterable[str]) -> str:
    return "+".join(o for o in OBJECTIVES if o in set(mask))


@dataclass(frozen=True)
class LossWeights:
    spr: float = 2.0
    inverse: float = 1.0
    goal: float = 1.0
    bc: float = 0.0

    def __post_init__(self):
        if min(self.spr, self.inverse, self.goal, self.bc) < 0:
            raise ValueError("loss weights must be non-negative")

    def of(self, objective: str) -> float:
        return {"S": self.spr, "G": self.goal, "I": self.inverse, "BC": self.bc}[objective]


@dataclass
class SequenceBatch:
    obs: np.ndarray  # [B, K+1, C, H, W] float
    actions: np.ndarray  # [B, K] int
    rewards: np.ndarray  # [B, K]
    dones: np.ndarray  # [B, K] bool
    mask: np.ndarray | None = None  # [B, K]; 1 where step k lies inside the episode
    goal_obs: np.ndarray | None = None  # [B, C, H, W] hindsight goal states
    goal_offsets: np.ndarray | None = None

    def __post_init__(self):
        B, K1 = self.obs.shape[:2]
        K = K1 - 1
        if K < 1 or self.actions.shape != (B, K) or self.dones.shape != (B, K) or self.rewards.shape != (B, K):
            raise DimensionError("inconsistent sequence batch shapes")
        if self.mask is None:
            self.mask = np.ones((B, K))
        inside = self.dones[:, :-1] & (self.mask[:, 1:] > 0)
        if inside.any():
            raise ContractError("episode boundary strictly inside a sequence")

    @property
    def depth(self) -> int:
        return self.actions.shape[1]

    @property
    def size(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class GoalConfig:
    horizon: int = 50
    alpha_max: float = 0.5
    permute_prob: float = 0.2
    fixed_alpha: float | None = None
    permute: bool = True
    negate_reward: bool = False


@dataclass
class GoalBatch:
    goals: np.ndarray  # [B, D] unit rows
    offsets: np.ndarray  # [B]
    alphas: np.ndarray  # [B]
    permuted: np.ndarray  # [B] bool


def sample_goal_offsets(remaining: np.ndarray, rng: np.random.Generator, horizon: int = 50) -> np.ndarray:
    """Offsets uniform on {1, ..., min(horizon, remaining)} per sample."""
    remaining = np.asarray(remaining, dtype=np.int64)
    if remaining.size == 0:
        raise ValueError("empty batch")
    if remaining.min() < 1:
        raise ValueError("every sample needs at least one future state")
    top = np.minimum(remaining, horizon)
    return 1 + np.floor(rng.random(remaining.shape) * top).astype(np.int64)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms


def make_goals(hindsight: np.ndarray, offsets: np.ndarray, rng: np.random.Generator,
               cfg: GoalConfig = GoalConfig()) -> GoalBatch:
    """Noise-mix and partially permute hindsight latents into unit-norm goals."""
    hindsight = np.asarray(hindsight, dtype=np.float64)
    B, D = hindsight.shape
    if B == 0:
        raise ValueError("empty batch")
    base, norms = _unit_rows(hindsight)
    noise, _ = _unit_rows(rng.standard_normal((B, D)))
    # a dead (all-zero) latent carries no direction; fall back to pure noise
    base[norms == 0] = noise[norms == 0]
    if cfg.fixed_alpha is None:
        alphas = rng.uniform(0.0, cfg.alpha_max, size=B)
    else:
        alphas = np.full(B, float(cfg.fixed_alpha))
    goals, _ = _unit_rows(alphas[:, None] * noise + (1 - alphas[:, None]) * base)
    permuted = np.zeros(B, dtype=bool)
    if cfg.permute:
        chosen = np.flatnonzero(rng.random(B) < cfg.permute_prob)
        if len(chosen) >= 2:
            order = rng.permutation(chosen)
            # a single cycle over the chosen subset: nobody keeps its own goal
            goals[order] = goals[np.roll(order, -1)]
            permuted[chosen] = True
    return GoalBatch(goals, np.asarray(offsets), alphas, permuted)


def sample_goals(latent_lookup: Callable[[np.ndarray], np.ndarray], remaining: np.ndarray,
                 rng: np.random.Generator, cfg: GoalConfig = GoalConfig()) -> GoalBatch:
    """Hindsight offsets -> target latents (via ``latent_lookup``) -> noisy, permuted goals."""
    offsets = sample_goal_offsets(remaining, rng, cfg.horizon)
    return make_goals(latent_lookup(offsets), offsets, rng, cfg)


def goal_distance(z: np.ndarray, g: np.ndarray, on_zero: str = "error") -> np.ndarray:
    """exp(2 cos(z, g) - 2), row-wise; in (0, 1], equal to 1 iff the cosine is 1."""
    cos = dc.cosine_similarity(Tensor(np.asarray(z, dtype=np.float64)), Tensor(np.asarray(g, dtype=np.float64)),
                               on_zero=on_zero).data
    return np.exp(2.0 * cos - 2.0)


def goal_reward(z_now: np.ndarray, z_next: np.ndarray, g: np.ndarray, negate: bool = False,
                on_zero: str = "error") -> np.ndarray:
    """d(z_now, g) - d(z_next, g) on target-encoder latents (sign flipped when ``negate``)."""
    r = goal_distance(z_now, g, on_zero) - goal_distance(z_next, g, on_zero)
    return -r if negate else r


def spr_loss(predictions: list[Tensor], targets: list[np.ndarray], mask: np.ndarray | None = None,
             on_zero: str = "error") -> Tensor:
    """-sum_k cos(prediction_k, target_k), averaged over the batch. Targets carry no gradient."""
    if len(predictions) < 1 or len(predictions) != len(targets):
        raise ValueError("need K >= 1 matching prediction/target pairs")
    B = predictions[0].shape[0]
    total = None
    for k, (p, t) in enumerate(zip(predictions, targets)):
        cos = dc.cosine_similarity(p, Tensor(np.asarray(t, dtype=p.dtype)), on_zero=on_zero)
        w = np.full(B, -1.0 / B) if mask is None else -np.asarray(mask[:, k], dtype=np.float64) / B
        term = dc.weighted_sum(cos, w)
        total = term if total is None else total + term
    return total


def td_targets(rewards: np.ndarray, dones: np.ndarray, next_q: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * (1 - done) * bootstrap."""
    return rewards + gamma * (1.0 - dones.astype(np.float64)) * next_q


def squared_td_loss(q: Tensor, actions: np.ndarray, targets: np.ndarray,
                    weights: np.ndarray | None = None) -> Tensor:
    """mean_b w_b (target_b - Q[b, a_b])^2."""
    chosen = dc.gather_rows(q, actions)
    err = dc.sub(chosen, Tensor(np.asarray(targets, dtype=q.dtype)))
    B = q.shape[0]
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64) / max(np.sum(weights), 1e-12)
    return dc.weighted_sum(dc.square(err), w)


def goal_rl_loss(net: Network, z_online: Tensor, goals: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                 z_next_target: np.ndarray, dones: np.ndarray, gamma: float = 0.99) -> Tensor:
    """Goal-conditioned TD loss; bootstraps from the EMA target encoder and goal head."""
    goals = np.asarray(goals)
    if goals.shape != (z_online.shape[0], net.cfg.encoder.dim):
        raise DimensionError(f"goal batch shape {goals.shape} does not match latents")
    q = nets.q_head(net, z_online, goals)
    q_next = nets.q_head(net, Tensor(np.asarray(z_next_target, dtype=net.dtype)), goals, target=True).data
    targets = td_targets(np.asarray(rewards, dtype=np.float64), np.asarray(dones), q_next.max(axis=1), gamma)
    return squared_td_loss(q, actions, targets)


def inverse_loss(net: Network, y_now: list[Tensor], y_next: list[np.ndarray], actions: np.ndarray,
                 mask: np.ndarray | None = None) -> tuple[Tensor, float]:
    """Mean cross-entropy of I(y_now_k, y_next_k) against a_k over all k; also returns accuracy."""
    K = len(y_now)
    if K < 1 or len(y_next) != K or actions.shape[1] != K:
        raise ValueError("need K >= 1 aligned inputs")
    B = actions.shape[0]
    logits = [nets.inverse_logits(net, y_now[k], Tensor(np.asarray(y_next[k], dtype=y_now[k].dtype)))
              for k in range(K)]
    stacked = dc.concat(logits, axis=0)
    labels = np.asarray(actions, dtype=np.int64).T.reshape(-1)
    w = None if mask is None else np.asarray(mask, dtype=np.float64).T.reshape(-1)
    loss = dc.softmax_cross_entropy(stacked, labels, w)
    hits = (stacked.data.argmax(axis=1) == labels).astype(np.float64)
    acc = float(hits.mean() if w is None else (hits * w).sum() / w.sum())
    return loss, acc


def bc_loss(net: Network, z: Tensor, actions: np.ndarray) -> Tensor:
    return dc.softmax_cross_entropy(nets.bc_logits(net, z), actions)


def active_terms(mask: Iterable[str], weights: LossWeights) -> list[str]:
    mask = set(mask)
    return [o for o in OBJECTIVES if o in mask and weights.of(o) > 0]


def used_blocks(mask: Iterable[str], weights: LossWeights, depth: int) -> list[str]:
    """Parameter blocks that receive gradient from the enabled, non-zero-weighted terms."""
    blocks: set[str] = set()
    for o in active_terms(mask, weights):
        if o == "S":
            blocks |= {"encoder", "transition", "projection", "predictor"}
        elif o == "I":
            blocks |= {"encoder", "projection", "inverse"}
            if depth >= 2:
                blocks.add("transition")
        elif o == "G":
            blocks |= {"encoder", "film", "goal_head"}
        elif o == "BC":
            blocks |= {"encoder", "bc_head"}
    return [b for b in nets.BLOCKS if b in blocks]


def _target_latents(net: Network, obs: np.ndarray) -> np.ndarray:
    """Target-encoder latents for [B, n, C, H, W] observations -> [B, n, D]."""
    B, n = obs.shape[:2]
    z = nets.encode(net, obs.reshape((B * n,) + obs.shape[2:]), target=True).data
    return z.reshape(B, n, -1)


def pretrain_loss(net: Network, batch: SequenceBatch, goals: GoalBatch | None, weights: LossWeights,
                  mask: Iterable[str], gamma: float = 0.99, goal_cfg: GoalConfig = GoalConfig(),
                  on_zero: str = "error", z0: Tensor | None = None,
                  z_future_target: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the enabled objectives over one (already augmented) batch.

    ``z0`` (online latents of the first observation) and ``z_future_target``
    ([B, K, D] target latents of observations 1..K) may be supplied by callers
    that already computed them for another loss. Returns the scalar loss and a
    per-term breakdown of plain floats.
    """
    mask = frozenset(mask)
    if not mask:
        raise ValueError("objective mask is empty")
    terms = active_terms(mask, weights)
    if not terms:
        raise ValueError("every enabled objective has zero weight")
    K = batch.depth
    obs = batch.obs.astype(net.dtype, copy=False)
    if z0 is None:
        z0 = nets.encode(net, obs[:, 0])
    need_future = "S" in terms or "I" in terms
    if need_future:
        z_tgt = _target_latents(net, obs[:, 1:]) if z_future_target is None else z_future_target  # z~_{1..K}
        y_tgt = [nets.project(net, Tensor(z_tgt[:, k]), target=True).data for k in range(K)]
    breakdown: dict[str, float] = {}
    parts: list[Tensor] = []

    y_hat: list[Tensor] = []
    if "S" in terms or ("I" in terms and K >= 2):
        steps = K if "S" in terms else K - 1
        rolled = nets.rollout_latents(net, z0, batch.actions[:, :steps])
        y_hat = [nets.project(net, z) for z in rolled]

    if "S" in terms:
        preds = [nets.predict(net, y) for y in y_hat]
        loss = spr_loss(preds, y_tgt, batch.mask, on_zero)
        breakdown["spr"] = loss.item()
        parts.append(dc.scale(loss, weights.spr))
    if "I" in terms:
        y_now = [nets.project(net, z0)] + y_hat[:K - 1]
        loss, acc = inverse_loss(net, y_now, y_tgt, batch.actions, batch.mask)
        breakdown["inverse"] = loss.item()
        breakdown["inverse_acc"] = acc
        parts.append(dc.scale(loss, weights.inverse))
    if "G" in terms:
        if goals is None:
            raise ContractError("goal objective enabled without a goal batch")
        z01 = _target_latents(net, obs[:, :2])
        r = goal_reward(z01[:, 0], z01[:, 1], goals.goals, goal_cfg.negate_reward, on_zero="zero")
        loss = goal_rl_loss(net, z0, goals.goals, batch.actions[:, 0], r, z01[:, 1], batch.dones[:, 0], gamma)
        breakdown["goal"] = loss.item()
        breakdown["goal_reward"] = float(r.mean())
        parts.append(dc.scale(loss, weights.goal))
    if "BC" in terms:
        loss = bc_loss(net, z0, batch.actions[:, 0])
        breakdown["bc"] = loss.item()
        parts.append(dc.scale(loss, weights.bc))

    total = parts[0]
    for p in parts[1:]:
        total = total + p
    breakdown["total"] = total.item()
    return total, breakdown
