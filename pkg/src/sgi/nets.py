"""Network components: encoders, dynamics, heads, FiLM, EMA targets, augmentation."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, Tensor

N_ACTIONS = 5

# parameter-name prefixes by functional block
BLOCKS = ("encoder", "transition", "projection", "predictor", "inverse", "film", "goal_head", "task_head", "bc_head")
# blocks that have an EMA target copy
TARGET_BLOCKS = ("encoder", "projection", "film", "goal_head", "task_head")


@dataclass(frozen=True)
class EncoderSpec:
    in_shape: tuple[int, int, int] = (4, 40, 40)
    # (out_channels, kernel, stride) per conv layer, each followed by ReLU
    convs: tuple[tuple[int, int, int], ...] = ((16, 4, 2), (32, 3, 2), (32, 3, 1))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        for ch, k, s in self.convs:
            h = dc.conv_output_size(h, k, s)
            w = dc.conv_output_size(w, k, s)
            c = ch
        return (c, h, w)

    @property
    def dim(self) -> int:
        c, h, w = self.latent_shape
        return c * h * w

    def to_dict(self) -> dict:
        return {"in_shape": list(self.in_shape), "convs": [list(c) for c in self.convs]}

    @classmethod
    def from_dict(cls, d: dict) -> EncoderSpec:
        return cls(in_shape=tuple(d["in_shape"]), convs=tuple(tuple(c) for c in d["convs"]))


@dataclass(frozen=True)
class NetConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    n_actions: int = N_ACTIONS
    proj_dim: int = 128
    head_hidden: int = 128
    film_channels: int = 32
    film_kernel: int = 3
    inverse_hidden: int = 128
    transition_channels: int = 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        d = dict(d)
        d["encoder"] = EncoderSpec.from_dict(d["encoder"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 2
    crop: int = 40
    jitter: float = 0.05

    def __post_init__(self):
        if self.pad < 0 or self.jitter < 0:
            raise ValueError("pad and jitter must be non-negative")


def _film_grid(cfg: NetConfig) -> tuple[int, int]:
    _, h, w = cfg.encoder.latent_shape
    for _ in range(2):
        h = dc.conv_output_size(h, cfg.film_kernel, 1)
        w = dc.conv_output_size(w, cfg.film_kernel, 1)
    return h, w


def _init_shapes(cfg: NetConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in). Fan-in 0 marks a bias."""
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    c = cfg.encoder.in_shape[0]
    for i, (ch, k, _) in enumerate(cfg.encoder.convs):
        shapes[f"encoder.conv{i}.w"] = ((ch, c, k, k), c * k * k)
        shapes[f"encoder.conv{i}.b"] = ((ch,), 0)
        c = ch
    lc = cfg.encoder.latent_shape[0]
    dz = cfg.encoder.dim
    A = cfg.n_actions
    tc = cfg.transition_channels
    shapes["transition.conv0.w"] = ((tc, lc + A, 3, 3), (lc + A) * 9)
    shapes["transition.conv0.b"] = ((tc,), 0)
    shapes["transition.conv1.w"] = ((lc, tc, 3, 3), tc * 9)
    shapes["transition.conv1.b"] = ((lc,), 0)
    shapes["projection.w"] = ((dz, cfg.proj_dim), dz)
    shapes["projection.b"] = ((cfg.proj_dim,), 0)
    shapes["predictor.w"] = ((cfg.proj_dim, cfg.proj_dim), cfg.proj_dim)
    shapes["predictor.b"] = ((cfg.proj_dim,), 0)
    shapes["inverse.fc0.w"] = ((2 * cfg.proj_dim, cfg.inverse_hidden), 2 * cfg.proj_dim)
    shapes["inverse.fc0.b"] = ((cfg.inverse_hidden,), 0)
    shapes["inverse.fc1.w"] = ((cfg.inverse_hidden, A), cfg.inverse_hidden)
    shapes["inverse.fc1.b"] = ((A,), 0)
    fc, fk = cfg.film_channels, cfg.film_kernel
    fh, fw = _film_grid(cfg)
    shapes["film.conv0.w"] = ((fc, lc, fk, fk), lc * fk * fk)
    shapes["film.conv0.b"] = ((fc,), 0)
    shapes["film.conv1.w"] = ((fc, fc, fk, fk), fc * fk * fk)
    shapes["film.conv1.b"] = ((fc,), 0)
    shapes["film.out.w"] = ((fc * fh * fw, 2 * cfg.head_hidden), fc * fh * fw)
    shapes["film.out.b"] = ((2 * cfg.head_hidden,), 0)
    for head in ("goal_head", "task_head"):
        shapes[f"{head}.fc0.w"] = ((dz, cfg.head_hidden), dz)
        shapes[f"{head}.fc0.b"] = ((cfg.head_hidden,), 0)
        shapes[f"{head}.fc1.w"] = ((cfg.head_hidden, A), cfg.head_hidden)
        shapes[f"{head}.fc1.b"] = ((A,), 0)
    shapes["bc_head.w"] = ((dz, A), dz)
    shapes["bc_head.b"] = ((A,), 0)
    return shapes


class Network:
    """Online parameters, EMA target parameters and the architecture they follow."""

    def __init__(self, cfg: NetConfig, online: dict[str, Tensor], target: dict[str, Tensor]):
        self.cfg = cfg
        self.online = online
        self.target = target

    @classmethod
    def init(cls, cfg: NetConfig | None = None, seed: int = 0, dtype=np.float32) -> Network:
        cfg = cfg or NetConfig()
        rng = np.random.default_rng(seed)
        online: dict[str, Tensor] = {}
        for name, (shape, fan_in) in _init_shapes(cfg).items():
            if fan_in:
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                data = np.zeros(shape)
            online[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
        # FiLM scales start at one so the goal head begins as a plain layer norm
        online["film.out.w"].data *= 0.1
        online["film.out.b"].data[: cfg.head_hidden] = 1.0
        for head in ("goal_head", "task_head", "bc_head"):
            key = f"{head}.fc1.w" if head != "bc_head" else "bc_head.w"
            online[key].data *= 0.1
        target = {
            k: Tensor(v.data.copy(), name=k) for k, v in online.items() if k.split(".")[0] in TARGET_BLOCKS
        }
        return cls(cfg, online, target)

    def block(self, name: str) -> list[Tensor]:
        return [t for k, t in self.online.items() if k.split(".")[0] == name]

    def params(self, side: str = "online") -> dict[str, Tensor]:
        return self.online if side == "online" else self.target

    def copy(self) -> Network:
        return Network(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.online.items()},
            {k: Tensor(v.data.copy(), name=k) for k, v in self.target.items()},
        )

    def astype(self, dtype) -> Network:
        return Network(
            self.cfg,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.online.items()},
            {k: Tensor(v.data.astype(dtype), name=k) for k, v in self.target.items()},
        )

    def zero_grad(self) -> None:
        dc.zero_grads(self.online.values())

    @property
    def dtype(self):
        return self.online["encoder.conv0.w"].dtype


def _p(net: Network, name: str, target: bool) -> Tensor:
    return net.target[name] if target else net.online[name]


def _frozen(t: Tensor) -> Tensor:
    return t if not t.requires_grad else Tensor(t.data)


def encode(net: Network, obs, target: bool = False) -> Tensor:
    """Flattened conv features [B, D_z]; ``target`` selects the EMA encoder."""
    x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=net.dtype))
    spec = net.cfg.encoder
    if x.data.ndim != 4 or x.shape[1:] != spec.in_shape:
        raise DimensionError(f"observation shape {x.shape[1:]} != encoder input {spec.in_shape}")
    for i, (_, _, stride) in enumerate(spec.convs):
        x = dc.relu(dc.conv2d(x, _p(net, f"encoder.conv{i}.w", target), _p(net, f"encoder.conv{i}.b", target), stride))
    return dc.reshape(x, (x.shape[0], spec.dim))


def transition(net: Network, z: Tensor, actions: np.ndarray) -> Tensor:
    """One latent step h(z, a): two padded 3x3 convs over [latent; one-hot action planes]."""
    actions = np.asarray(actions, dtype=np.int64)
    A = net.cfg.n_actions
    if actions.size and (actions.min() < 0 or actions.max() >= A):
        raise IndexError("action index out of range")
    c, h, w = net.cfg.encoder.latent_shape
    B = z.shape[0]
    planes = np.zeros((B, A, h, w), dtype=z.dtype)
    planes[np.arange(B), actions] = 1.0
    x = dc.concat([dc.reshape(z, (B, c, h, w)), Tensor(planes)], axis=1)
    x = dc.relu(dc.conv2d(dc.pad2d(x, 1), net.online["transition.conv0.w"], net.online["transition.conv0.b"]))
    x = dc.relu(dc.conv2d(dc.pad2d(x, 1), net.online["transition.conv1.w"], net.online["transition.conv1.b"]))
    return dc.reshape(x, (B, c * h * w))


def rollout_latents(
    net: Network,
    z: Tensor,
    actions: np.ndarray,
    step: Callable[[Network, Tensor, np.ndarray], Tensor] | None = None,
) -> list[Tensor]:
    """Apply the transition model recursively; actions is [B, K], returns K latents."""
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[1] < 1:
        raise ValueError("actions must be [B, K] with K >= 1")
    step = step or transition
    out = []
    cur = z
    for k in range(actions.shape[1]):
        cur = step(net, cur, actions[:, k])
        out.append(cur)
    return out


def project(net: Network, z: Tensor, target: bool = False) -> Tensor:
    return dc.affine(z, _p(net, "projection.w", target), _p(net, "projection.b", target))


def predict(net: Network, y: Tensor) -> Tensor:
    return dc.affine(y, net.online["predictor.w"], net.online["predictor.b"])


def project_predict(net: Network, latents: Tensor, side: str = "online") -> Tensor:
    """Online side gives q(p_o(z)); target side gives p_m(z) with no gradient."""
    if side == "online":
        return predict(net, project(net, latents))
    if side == "target":
        return project(net, _frozen(latents), target=True)
    raise ValueError(f"unknown side {side!r}")


def ema_update(net: Network, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, for every target tensor."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for name, t in net.target.items():
        src = net.online[name]
        if src.shape != t.shape:
            raise ContractError(f"EMA shape mismatch for {name}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            t.data[...] = src.data
            continue
        t.data *= t.dtype.type(tau)
        t.data += t.dtype.type(1.0 - tau) * src.data


def film_modulate(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return dc.modulated_norm(features, gamma, beta)


def film_generator(net: Network, goals, target: bool = False) -> tuple[Tensor, Tensor]:
    """Goal [B, D_z] viewed on the encoder grid -> two convs -> linear -> (gamma, beta)."""
    g = goals if isinstance(goals, Tensor) else Tensor(np.asarray(goals, dtype=net.dtype))
    c, h, w = net.cfg.encoder.latent_shape
    if g.data.ndim != 2 or g.shape[1] != c * h * w:
        raise DimensionError(f"goal dimension {g.shape[1:]} != latent dimension {c * h * w}")
    B = g.shape[0]
    x = dc.reshape(g, (B, c, h, w))
    x = dc.relu(dc.conv2d(x, _p(net, "film.conv0.w", target), _p(net, "film.conv0.b", target)))
    x = dc.relu(dc.conv2d(x, _p(net, "film.conv1.w", target), _p(net, "film.conv1.b", target)))
    x = dc.reshape(x, (B, int(np.prod(x.shape[1:]))))
    out = dc.affine(x, _p(net, "film.out.w", target), _p(net, "film.out.b", target))
    hdim = net.cfg.head_hidden
    return dc.columns(out, 0, hdim), dc.columns(out, hdim, 2 * hdim)


def q_head(net: Network, z: Tensor, goals=None, target: bool = False) -> Tensor:
    """Q-values from latents. With goals: FiLM after the first layer; without: task head."""
    if goals is None:
        h = dc.relu(dc.affine(z, _p(net, "task_head.fc0.w", target), _p(net, "task_head.fc0.b", target)))
        return dc.affine(h, _p(net, "task_head.fc1.w", target), _p(net, "task_head.fc1.b", target))
    gamma, beta = film_generator(net, goals, target)
    h = dc.affine(z, _p(net, "goal_head.fc0.w", target), _p(net, "goal_head.fc0.b", target))
    h = dc.relu(film_modulate(h, gamma, beta))
    return dc.affine(h, _p(net, "goal_head.fc1.w", target), _p(net, "goal_head.fc1.b", target))


def q_values(net: Network, obs, goals=None, target: bool = False) -> Tensor:
    return q_head(net, encode(net, obs, target), goals, target)


def inverse_logits(net: Network, y_now: Tensor, y_next: Tensor) -> Tensor:
    x = dc.concat([y_now, y_next], axis=1)
    x = dc.relu(dc.affine(x, net.online["inverse.fc0.w"], net.online["inverse.fc0.b"]))
    return dc.affine(x, net.online["inverse.fc1.w"], net.online["inverse.fc1.b"])


def bc_logits(net: Network, z: Tensor) -> Tensor:
    return dc.affine(z, net.online["bc_head.w"], net.online["bc_head.b"])


def _truncated_normal(rng: np.random.Generator, size: int, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def augment(obs: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random crop back to size, then per-image intensity jitter, clamp to [0, 1].

    ``obs`` is [N, C, H, W]; the same crop applies to every channel of an image.
    """
    obs = np.asarray(obs)
    n, c, h, w = obs.shape
    out = obs
    if cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(obs, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        if cfg.crop > padded.shape[2]:
            raise ValueError("crop size exceeds padded size")
        span = padded.shape[2] - cfg.crop
        dy = rng.integers(0, span + 1, size=n)
        dx = rng.integers(0, span + 1, size=n)
        rows = dy[:, None] + np.arange(cfg.crop)[None, :]
        cols = dx[:, None] + np.arange(cfg.crop)[None, :]
        out = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                     rows[:, None, :, None], cols[:, None, None, :]]
    if cfg.jitter > 0:
        eps = _truncated_normal(rng, n).astype(out.dtype)
        out = np.clip(out * (1 + cfg.jitter * eps)[:, None, None, None], 0.0, 1.0)
    return out.astype(obs.dtype, copy=False)


def collapse_vectors(net: Network, obs: np.ndarray, use_projection: bool = True) -> np.ndarray:
    """Online representations used by the collapse metric (y = p_o(z) by default)."""
    z = encode(net, obs)
    return project(net, _frozen(z)).data if use_projection else z.data


def weight_distance(net: Network, names: Iterable[str] | None = None) -> float:
    names = list(names) if names is not None else list(net.target)
    total = 0.0
    for k in names:
        d = net.online[k].data.astype(np.float64) - net.target[k].data.astype(np.float64)
        total += float((d * d).sum())
    return float(np.sqrt(total))
