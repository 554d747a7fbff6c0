"""Self-check suite: gradient checks and algebraic/statistical invariants.

Every check returns ``(passed, detail)``. The suite is run by ``sgi verify`` and
reused by the test-suite; gradient checks run in float64 on a reduced network.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import evalstats as es
from . import nets
from . import objectives as obj
from .diffcore import Tensor

GRAD_TOL = 1e-4
N_INSTANCES = 20

# a shrunken architecture keeps float64 finite differences affordable
TINY_NET = nets.NetConfig(
    encoder=nets.EncoderSpec(in_shape=(2, 12, 12), convs=((3, 3, 2), (4, 3, 1))),
    proj_dim=6, head_hidden=5, film_channels=3, film_kernel=2, inverse_hidden=5, transition_channels=3,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _worst(f: Callable[[], Tensor], tensors, h=1e-5, max_coords=None, rng=None) -> float:
    worst = 0.0
    for t in tensors:
        idx = None
        if max_coords is not None and t.data.size > max_coords:
            flat = rng.choice(t.data.size, size=max_coords, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat]
        worst = max(worst, dc.grad_check(f, t, h=h, indices=idx))
    return worst


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    x = _param(rng, 3, 4)
    w = _param(rng, 4, 5)
    b = _param(rng, 5)
    u = _param(rng, 3, 4)
    img = _param(rng, 2, 3, 7, 6)
    k = _param(rng, 4, 3, 3, 3)
    kb = _param(rng, 4)
    ca, cb = _param(rng, 4, 6), _param(rng, 4, 6)
    logits = _param(rng, 4, 5)
    labels = rng.integers(0, 5, size=4)
    ln_x, ln_s, ln_b = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    fx, fg, fb = _param(rng, 3, 6), _param(rng, 3, 6), _param(rng, 3, 6)
    cw = rng.standard_normal((3, 4))
    cases = {
        "affine": (lambda: dc.weighted_sum(dc.affine(x, w, b), np.cos(np.arange(15.0)).reshape(3, 5)), [x, w, b]),
        "elementwise": (lambda: dc.weighted_sum(dc.add(dc.mul(x, u), dc.exp(dc.scale(dc.sub(x, u), 0.3))), cw)
                        + dc.mean(dc.square(u)), [x, u]),
        "relu": (lambda: dc.weighted_sum(dc.relu(x), cw), [x]),
        "shape_ops": (lambda: dc.total(dc.square(dc.concat([dc.columns(x, 1, 3), dc.select(u, 2, axis=1)
                                                              .reshape(3, 1)], axis=1)))
                      + dc.total(dc.gather_rows(u, np.array([0, 3, 1]))), [x, u]),
        "conv2d": (lambda: dc.total(dc.square(dc.conv2d(dc.pad2d(img, 1), k, kb, stride=2))), [img, k, kb]),
        "cosine_similarity": (lambda: dc.weighted_sum(dc.cosine_similarity(ca, cb), np.arange(1.0, 5.0)), [ca, cb]),
        "softmax_cross_entropy": (lambda: dc.softmax_cross_entropy(logits, labels), [logits]),
        "layer_norm": (lambda: dc.weighted_sum(dc.layer_norm(ln_x, ln_s, ln_b), np.sin(np.arange(18.0)).reshape(3, 6)),
                       [ln_x, ln_s, ln_b]),
        "film_modulate": (lambda: dc.weighted_sum(nets.film_modulate(fx, fg, fb),
                                                  np.cos(np.arange(18.0)).reshape(3, 6)), [fx, fg, fb]),
    }
    return cases


def check_op_gradients() -> list[tuple[str, bool, str]]:
    """Per-op worst relative error over N_INSTANCES random instances."""
    worst: dict[str, float] = {}
    for seed in range(N_INSTANCES):
        rng = np.random.default_rng([seed, 11])
        for name, (f, tensors) in _op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), _worst(f, tensors))
    return [(f"grad:{n}", e < GRAD_TOL, f"max rel err {e:.2e}") for n, e in worst.items()]


def micro_batch(rng, cfg: nets.NetConfig = TINY_NET, B: int = 2, K: int = 2) -> obj.SequenceBatch:
    obs = rng.random((B, K + 1) + cfg.encoder.in_shape)
    actions = rng.integers(0, cfg.n_actions, size=(B, K))
    return obj.SequenceBatch(obs, actions, np.zeros((B, K)), np.zeros((B, K), dtype=bool))


def sgi_loss_case(seed: int, mask="S,G,I", B: int = 2, K: int = 2):
    """Float64 tiny network, micro-batch and goal batch; returns (net, loss_fn)."""
    rng = np.random.default_rng([seed, 12])
    net = nets.Network.init(TINY_NET, seed=seed, dtype=np.float64)
    for k, t in net.online.items():
        # move targets off the online weights and biases off zero so every path is exercised
        t.data += 0.05 * rng.standard_normal(t.shape)
        if k in net.target:
            net.target[k].data += 0.05 * rng.standard_normal(t.shape)
    batch = micro_batch(rng, TINY_NET, B, K)
    goals = obj.make_goals(rng.standard_normal((B, TINY_NET.encoder.dim)), np.ones(B, dtype=int), rng)
    mask = obj.parse_mask(mask)

    def loss():
        return obj.pretrain_loss(net, batch, goals, obj.LossWeights(bc=0.5), mask)[0]

    return net, loss


def check_sgi_loss_gradient() -> list[tuple[str, bool, str]]:
    worst = 0.0
    for seed in range(N_INSTANCES):
        net, loss = sgi_loss_case(seed, "S,G,I,BC")
        rng = np.random.default_rng([seed, 13])
        worst = max(worst, _worst(loss, list(net.online.values()), max_coords=3, rng=rng))
    return [("grad:sgi_pretrain_loss", worst < GRAD_TOL, f"max rel err {worst:.2e}")]


def check_cosine_bounds() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2000, 7)) * rng.lognormal(0, 3, size=(2000, 1))
    b = np.where(rng.random((2000, 1)) < 0.3, -a * 2.5, rng.standard_normal((2000, 7)))
    c = dc.cosine_similarity(Tensor(a), Tensor(b)).data
    ok = bool(np.all(np.abs(c) <= 1 + 1e-12))
    return [("cosine_in_unit_interval", ok, f"max |cos| {np.abs(c).max():.15f}")]


def check_adam_zero_gradient() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(6)
    t = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    before = t.data.copy()
    state = dc.AdamState(lr=0.1)
    for _ in range(3):
        t.grad = np.zeros_like(t.data)
        dc.adam_step([dc.ParamGroup("p", [t])], state)
    ok = np.array_equal(before, t.data)
    return [("adam_zero_grad_identity", ok, "unchanged" if ok else "parameters moved")]


def check_ema_decay() -> list[tuple[str, bool, str]]:
    net = nets.Network.init(TINY_NET, seed=3, dtype=np.float64)
    rng = np.random.default_rng(7)
    for t in net.target.values():
        t.data += rng.standard_normal(t.shape)
    gap0 = nets.weight_distance(net)
    for _ in range(100):
        nets.ema_update(net, 0.99)
    rel = abs(nets.weight_distance(net) - 0.99 ** 100 * gap0) / gap0
    return [("ema_geometric_decay", rel < 1e-9, f"relative deviation {rel:.1e}")]


def check_reward_telescoping() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((51, 16))
        g = rng.standard_normal((1, 16))
        g /= np.linalg.norm(g)
        gs = np.repeat(g, 50, axis=0)
        r = obj.goal_reward(z[:-1], z[1:], gs)
        lhs = r.sum()
        rhs = obj.goal_distance(z[:1], g)[0] - obj.goal_distance(z[-1:], g)[0]
        worst = max(worst, abs(lhs - rhs))
    return [("goal_reward_telescopes", worst < 1e-10, f"max deviation {worst:.1e}")]


def check_spr_scale_invariance() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        preds = [rng.standard_normal((6, 8)) for _ in range(3)]
        tgts = [rng.standard_normal((6, 8)) for _ in range(3)]
        c = rng.uniform(1e-3, 1e3)
        base = obj.spr_loss([Tensor(p) for p in preds], tgts).item()
        scaled = obj.spr_loss([Tensor(c * p) for p in preds], [c * t for t in tgts]).item()
        worst = max(worst, abs(base - scaled))
    return [("spr_scale_invariance", worst < 1e-9, f"max deviation {worst:.1e}")]


def trimmed_mean_oracle(values) -> float:
    """Brute force: repeatedly drop one current min and one current max."""
    rest = list(values)
    for _ in range(len(values) // 4):
        rest.remove(min(rest))
        rest.remove(max(rest))
    return sum(rest) / len(rest)


def check_iqm_oracle() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(10)
    worst = 0.0
    for trial in range(1000):
        n = 1 + trial % 12
        x = rng.standard_normal(n) * 10
        worst = max(worst, abs(es.iqm(x) - trimmed_mean_oracle(x)))
    return [("iqm_trim_oracle", worst < 1e-12, f"max deviation {worst:.1e}")]


def check_hns_and_bootstrap() -> list[tuple[str, bool, str]]:
    out = []
    ends = es.hns(7.0, 2.0, 7.0) == 1.0 and es.hns(2.0, 2.0, 7.0) == 0.0
    out.append(("hns_endpoints", ends, "exact"))
    alien = es.hns(1101.7, 227.8, 7127.7)
    out.append(("hns_reference_value", abs(alien - 0.12665) < 1e-5, f"{alien:.6f}"))
    data = np.random.default_rng(11).standard_normal(30)
    r1 = es.bootstrap_ci(data, "iqm", 500, seed=4)
    r2 = es.bootstrap_ci(data, "iqm", 500, seed=4)
    out.append(("bootstrap_deterministic", r1 == r2, f"[{r1.lower:.4f}, {r1.upper:.4f}]"))
    return out


def check_goal_sampler() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(12)
    n = 100_000
    remaining = np.full(n, 1000)
    offsets = obj.sample_goal_offsets(remaining, rng, 50)
    latents = rng.standard_normal((n, 4))
    gb = obj.make_goals(latents, offsets, rng)
    frac = gb.permuted.mean()
    a = np.sort(gb.alphas)
    cdf = a / 0.5
    ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    counts = np.bincount(offsets, minlength=51)[1:]
    chi2 = float(((counts - n / 50) ** 2 / (n / 50)).sum())
    # 99th percentile of chi-square with 49 degrees of freedom
    chi2_crit = 74.919
    norms = np.abs(np.linalg.norm(gb.goals, axis=1) - 1).max()
    return [
        ("goal_permuted_fraction", abs(frac - 0.2) <= 0.01, f"{frac:.4f}"),
        ("goal_alpha_uniform", ks < 0.01, f"KS {ks:.4f}"),
        ("goal_offsets_uniform", chi2 < chi2_crit, f"chi2 {chi2:.1f}"),
        ("goal_unit_norm", norms < 1e-6, f"max |norm-1| {norms:.1e}"),
    ]


def check_film_identity() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((5, 8)))
    ones, zeros = np.ones((5, 8)), np.zeros((5, 8))
    a = nets.film_modulate(x, Tensor(ones), Tensor(zeros)).data
    b = dc.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    return [("film_identity_is_layer_norm", np.array_equal(a, b), "exact")]


def check_forward_determinism() -> list[tuple[str, bool, str]]:
    net, loss = sgi_loss_case(0)
    a, b = loss().item(), loss().item()
    return [("forward_bit_deterministic", a == b, f"{a!r}")]


CHECKS: list[Callable[[], list[tuple[str, bool, str]]]] = [
    check_op_gradients,
    check_sgi_loss_gradient,
    check_cosine_bounds,
    check_adam_zero_gradient,
    check_ema_decay,
    check_reward_telescoping,
    check_spr_scale_invariance,
    check_iqm_oracle,
    check_hns_and_bootstrap,
    check_goal_sampler,
    check_film_identity,
    check_forward_determinism,
]


def run_all(checks=None) -> list[CheckResult]:
    results = []
    for check in checks or CHECKS:
        t = time.perf_counter()
        try:
            rows = check()
        except Exception as exc:  # a crashing check is a failing check
            rows = [(check.__name__, False, f"{type(exc).__name__}: {exc}")]
        dt = time.perf_counter() - t
        results.extend(CheckResult(name, bool(ok), detail, dt / len(rows)) for name, ok, detail in rows)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
