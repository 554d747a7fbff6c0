import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sgi import agent, envsim, nets
from sgi import diffcore as dc
from sgi.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from sgi.diffcore import Tensor
from sgi.envsim import GridPixEnv
from sgi.replay import TransitionStore

SMALL_PRETRAIN = dict(batch_size=4, depth=2, steps=3, log_every=1, probe_size=16)
SMALL_FINETUNE = dict(budget=260, warmup=200, update_every=20, batch_size=4, depth=2, eval_episodes=2)


@pytest.fixture(scope="module")
def small_dataset():
    return envsim.collect_random(GridPixEnv(0), 300, seed=0)


@pytest.fixture(scope="module")
def pretrained(small_dataset):
    return agent.pretrain(small_dataset, agent.PretrainConfig(**SMALL_PRETRAIN))


@pytest.fixture
def net_with_q(monkeypatch):
    net = nets.Network.init(seed=0, dtype=np.float64)

    def install(q):
        monkeypatch.setattr(nets, "q_values", lambda n, obs, goals=None, target=False:
                            Tensor(np.tile(np.asarray(q, float), (len(obs), 1))))
        return net

    return install


# acting


def test_act_greedy_and_ties(net_with_q):
    obs = np.zeros((4, 40, 40), np.float32)
    rng = np.random.default_rng(0)
    assert agent.act(net_with_q([0, 3, 1, 1, 1]), obs, 0.0, rng) == 1
    assert agent.act(net_with_q([2, 2, 0, 0, 0]), obs, 0.0, rng) == 0


def test_act_uniform_when_epsilon_one(net_with_q):
    net = net_with_q([9, 0, 0, 0, 0])
    rng = np.random.default_rng(1)
    obs = np.zeros((4, 40, 40), np.float32)
    counts = np.bincount([agent.act(net, obs, 1.0, rng) for _ in range(100_000)], minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01


def test_act_rejects_bad_epsilon(net_with_q):
    with pytest.raises(ValueError):
        agent.act(net_with_q([0] * 5), np.zeros((4, 40, 40)), 1.5, np.random.default_rng(0))


# evaluation


def test_oracle_policy_scores_six():
    env = GridPixEnv(0)
    mean, per = agent.evaluate_agent(envsim.oracle_q_values(env.layout), env, n_episodes=5, seed=0, epsilon=0.0)
    assert mean == 6.0 and per == [6.0] * 5


def test_evaluation_is_repeatable():
    net = nets.Network.init(seed=3)
    env = GridPixEnv(1, episode_cap=30)
    a = agent.evaluate_agent(net, env, n_episodes=3, seed=2, epsilon=0.3)
    b = agent.evaluate_agent(net, env, n_episodes=3, seed=2, epsilon=0.3)
    assert a == b


def test_single_episode_mean():
    env = GridPixEnv(0, episode_cap=20)
    mean, per = agent.evaluate_agent(nets.Network.init(seed=0), env, n_episodes=1)
    assert mean == per[0]
    with pytest.raises(ValueError):
        agent.evaluate_agent(nets.Network.init(seed=0), env, n_episodes=0)


# DQN loss


def _zero_head_net(bias):
    net = nets.Network.init(seed=0, dtype=np.float64)
    for side in (net.online, net.target):
        for k, t in side.items():
            if k.startswith("task_head."):
                t.data[:] = 0
        last = max(k for k in side if k.startswith("task_head.") and k.endswith(".b"))
        side[last].data[:] = bias
    return net


def test_dqn_loss_zero_when_consistent():
    # constant Q = c for every action satisfies c = r + gamma c when r = c (1 - gamma)
    gamma, c = 0.9, 2.0
    net = _zero_head_net(c)
    obs = np.random.default_rng(0).random((3, 4, 40, 40))
    loss = agent.dqn_loss(net, obs, np.array([0, 2, 4]), np.full(3, c * (1 - gamma)), obs, np.zeros(3, bool), gamma)
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_dqn_loss_terminal_uses_reward_only():
    net = _zero_head_net(1.0)
    obs = np.zeros((2, 4, 40, 40))
    loss = agent.dqn_loss(net, obs, np.array([1, 3]), np.array([4.0, -1.0]), obs, np.array([True, True]), 0.99)
    assert loss.item() == pytest.approx(((1 - 4) ** 2 + (1 + 1) ** 2) / 2)


@pytest.mark.parametrize("double", [True, False])
def test_dqn_loss_gradient(double):
    from sgi.verify import TINY_NET

    rng = np.random.default_rng(5)
    net = nets.Network.init(TINY_NET, seed=5, dtype=np.float64)
    for t in net.online.values():
        t.data += 0.05 * rng.standard_normal(t.shape)
    obs, nxt = rng.random((3,) + TINY_NET.encoder.in_shape), rng.random((3,) + TINY_NET.encoder.in_shape)
    args = (np.array([0, 1, 4]), rng.standard_normal(3), nxt, np.array([False, True, False]), 0.9, double)

    def f():
        return agent.dqn_loss(net, obs, *args[:1], args[1], *args[2:])

    w = net.online["task_head.fc0.w"]
    assert dc.grad_check(f, w, indices=[(0, 0), (5, 1), (17, 3)]) < 1e-4
    assert dc.grad_check(f, net.online["encoder.conv0.w"], indices=[(0, 0, 0, 0), (2, 1, 2, 1)]) < 1e-4


# finetune schemes


def test_finetune_scales_table():
    blocks = ["encoder", "transition", "projection", "predictor", "task_head"]
    pre = ["encoder", "transition", "projection", "predictor"]
    assert agent.finetune_scales("naive", blocks, pre) == dict.fromkeys(blocks, 1.0)
    reduced = agent.finetune_scales("reduced", blocks, pre)
    assert reduced == {"encoder": 0.01, "transition": 0.01, "projection": 1 / 3, "predictor": 1 / 3,
                       "task_head": 1.0}
    frozen = agent.finetune_scales("frozen", blocks, pre)
    assert frozen["encoder"] == 0.0 and frozen["transition"] == 1.0
    assert agent.finetune_scales("reduced", blocks, []) == dict.fromkeys(blocks, 1.0)


def test_unknown_scheme():
    with pytest.raises(ValueError):
        agent.FinetuneConfig(scheme="partial")


def test_frozen_encoder_bit_identical(pretrained):
    ck, _ = pretrained
    before = {k: v.data.tobytes() for k, v in ck.network.online.items() if k.startswith("encoder.")}
    res = agent.finetune(GridPixEnv(0), ck, agent.FinetuneConfig(scheme="frozen", **SMALL_FINETUNE), dtype=np.float32)
    after = {k: v.data.tobytes() for k, v in res.network.online.items() if k.startswith("encoder.")}
    assert before == after
    assert res.network.online["task_head.fc0.w"].data.tobytes() != ck.network.online["task_head.fc0.w"].data.tobytes()


def test_reduced_scheme_groups(pretrained):
    ck, _ = pretrained
    res = agent.finetune(GridPixEnv(0), ck, agent.FinetuneConfig(**SMALL_FINETUNE), evaluate=False)
    scales = {g.name: g.learning_rate_scale for g in res.groups}
    assert scales["encoder"] == 0.01 and scales["transition"] == 0.01
    assert scales["projection"] == scales["predictor"] == 1 / 3
    assert scales["task_head"] == 1.0
    assert res.eval_mean is None


def test_naive_scheme_groups(pretrained):
    ck, _ = pretrained
    res = agent.finetune(GridPixEnv(0), ck, agent.FinetuneConfig(scheme="naive", **SMALL_FINETUNE), evaluate=False)
    assert all(g.learning_rate_scale == 1.0 for g in res.groups)


def test_finetune_rejects_incompatible_checkpoint(pretrained):
    ck, _ = pretrained
    other = nets.NetConfig(proj_dim=64)
    with pytest.raises(agent.CheckpointFormatError):
        agent.finetune(GridPixEnv(0), ck, agent.FinetuneConfig(net=other, **SMALL_FINETUNE))


def test_finetune_deterministic():
    cfg = agent.FinetuneConfig(**SMALL_FINETUNE, snapshot_every=130)
    a = agent.finetune(GridPixEnv(0), None, cfg)
    b = agent.finetune(GridPixEnv(0), None, cfg)
    assert a.episode_returns == b.episode_returns and a.eval_returns == b.eval_returns
    assert a.log == b.log
    assert len(a.snapshots) == 2
    assert checkpoint_bytes(a.snapshots[-1]) == checkpoint_bytes(b.snapshots[-1])


# pretraining


def test_pretrain_deterministic_and_logged(small_dataset, pretrained):
    ck, log = pretrained
    ck2, log2 = agent.pretrain(small_dataset, agent.PretrainConfig(**SMALL_PRETRAIN))
    assert checkpoint_bytes(ck) == checkpoint_bytes(ck2)
    assert log == log2 and len(log) == 3
    for rec in log:
        assert {"spr", "goal", "inverse", "total", "collapse", "step"} <= set(rec)
    assert ck.provenance["objectives"] and set(ck.pretrained_blocks) >= {"encoder", "transition", "film"}


def test_pretrain_only_updates_used_blocks(small_dataset):
    ck, _ = agent.pretrain(small_dataset, agent.PretrainConfig(objectives="S", **SMALL_PRETRAIN))
    fresh = nets.Network.init(seed=0, dtype=np.float32)
    for name in ("film.out.w", "goal_head.fc0.w", "inverse.fc0.w", "task_head.fc0.w"):
        np.testing.assert_array_equal(ck.network.online[name].data, fresh.online[name].data)
    assert not np.array_equal(ck.network.online["encoder.conv0.w"].data, fresh.online["encoder.conv0.w"].data)


def test_pretrain_depth_too_large():
    d = envsim.collect_random(GridPixEnv(0), 20, seed=0)
    with pytest.raises(ValueError):
        agent.pretrain(d, agent.PretrainConfig(batch_size=4, depth=500, steps=1))


def test_pretrain_steps_from_epochs():
    assert agent.PretrainConfig(epochs=2, batch_size=100).total_steps(1000) == 20
    assert agent.PretrainConfig(steps=7).total_steps(1000) == 7


# checkpoints


def test_checkpoint_round_trip(tmp_path, pretrained):
    ck, _ = pretrained
    save_checkpoint(ck, tmp_path / "a.sgic")
    back = load_checkpoint(tmp_path / "a.sgic")
    assert back.provenance == ck.provenance and back.fingerprint == ck.fingerprint
    for k, t in ck.network.online.items():
        assert back.network.online[k].data.tobytes() == t.data.tobytes()
    for k, t in ck.network.target.items():
        assert back.network.target[k].data.tobytes() == t.data.tobytes()
    assert checkpoint_bytes(back) == checkpoint_bytes(ck)


def test_checkpoint_corruption_detected(pretrained):
    raw = checkpoint_bytes(pretrained[0])
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        with pytest.raises(agent.CheckpointFormatError):
            parse_checkpoint(bad)


# policy datasets


def test_collect_policy_and_mixed_segments(pretrained):
    ck, _ = pretrained
    d = envsim.collect_policy(GridPixEnv(0), ck, 0.5, 120, seed=1)
    assert d.count == 120
    mixed = envsim.build_mixed_dataset([ck, ck, ck], 50, GridPixEnv(0), seed=2)
    segs = mixed.metadata["segments"]
    assert len(segs) == 3 and mixed.count == 150
    assert sum(len(ep) for ep in envsim.segment_episodes(mixed, 1)) == 50
    with pytest.raises(ValueError):
        envsim.build_mixed_dataset([ck], 50, GridPixEnv(0), seed=2)


def test_collect_policy_requires_task_head():
    with pytest.raises(envsim.DatasetFormatError):
        envsim.collect_policy(GridPixEnv(0), object(), 0.1, 10, seed=0)


def test_mixed_segments_follow_policy_quality(monkeypatch):
    # three scripted policies of increasing quality, realised as epsilon levels around the BFS oracle
    env = GridPixEnv(0)
    oracle = envsim.oracle_q_values(env.layout)
    monkeypatch.setattr(nets, "q_values", lambda n, obs, goals=None, target=False: Tensor(oracle(obs)))
    ck = agent.AgentCheckpoint(nets.Network.init(seed=0), {"id": "oracle"})
    scores = []
    for i, eps in enumerate([1.0, 0.5, 0.0]):
        d = envsim.collect_policy(env, ck, eps, 400, seed=i)
        scores.append(envsim.dataset_stats(d)["avg_clipped_reward_per_episode"])
    assert scores[0] < scores[1] < scores[2]


# replay


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6), st.booleans())
def test_replay_sequences_never_cross_episodes(seed, depth, full):
    d = envsim.collect_random(GridPixEnv(seed % 5, episode_cap=15), 120, seed=seed)
    store = TransitionStore.from_dataset(d)
    rng = np.random.default_rng(seed)
    try:
        b = store.sample(rng, 16, depth, full_sequences=full)
    except ValueError:
        assert full
        return
    # inside the mask, a terminal may only appear on the last live step
    for row in range(16):
        live = int(b.mask[row].sum())
        assert live >= 1
        assert not b.dones[row, :live - 1].any()
        if full:
            assert live == depth
        # the first frame of each stack after the start must belong to the same episode
        pos = [envsim.decode_frame(b.obs[row, k, -1])[0] for k in range(live + 1)]
        for p, q in zip(pos, pos[1:]):
            assert abs(p[0] - q[0]) + abs(p[1] - q[1]) <= 1


def test_replay_capacity_window():
    store = TransitionStore(capacity=10)
    store.start_episode(np.zeros((40, 40), np.uint8))
    for i in range(30):
        store.add(0, 0.0, False, np.zeros((40, 40), np.uint8))
    assert store.window() == 20
    assert store.valid_starts(1).min() >= 20
