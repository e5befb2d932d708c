"""Replay, schedules, targets, updates, collection, and the train loop."""

import math

import numpy as np
import pytest
from scipy import stats

from swarmtrack.core import SeededStream
from swarmtrack.encoding import FeatureSet, TargetFeature
from swarmtrack.environment import WorldConfig, reset
from swarmtrack.trainer import (
    Adam,
    AlphaSchedule,
    QNets,
    ReplayBuffer,
    TrainConfig,
    TrainingDivergedError,
    Transition,
    clipped_bootstrap,
    collect_episode,
    hard_double_q_target,
    huber,
    policy_distribution,
    sample_task,
    select_action,
    soft_double_q_target,
    soft_state_value,
    train,
    update_step,
)
from swarmtrack.valuenet import NetConfig, load_checkpoint, qvalues

SMALL = NetConfig(embed_dim=8, n_heads=2, n_attention_blocks=1,
                  decoder_hidden=8)


def fs_of(rows) -> FeatureSet:
    feats = tuple(TargetFeature(*r) for r in rows)
    return FeatureSet(feats, tuple(range(len(rows))))


def random_fs(rng, m) -> FeatureSet:
    return fs_of(rng.standard_normal((m, 6)))


def random_transition(rng, m, done=False) -> Transition:
    return Transition(random_fs(rng, m), int(rng.integers(12)),
                      float(rng.standard_normal()), random_fs(rng, m), done)


@pytest.fixture(scope="module")
def nets() -> QNets:
    pair = QNets.fresh(SMALL, SeededStream(77))
    # separate the targets from the online nets so min_k is nontrivial
    for t in pair.target:
        t.theta += 0.01 * SeededStream(78).rng.standard_normal(t.n_values)
    return pair


# ------------------------------------------------------------ transitions

def test_transition_validation():
    rng = np.random.default_rng(0)
    t = random_transition(rng, 3)
    assert len(t.s.features) == len(t.s_next.features)
    with pytest.raises(ValueError):
        Transition(random_fs(rng, 2), 12, 0.0, random_fs(rng, 2), False)
    with pytest.raises(ValueError):
        Transition(random_fs(rng, 2), 0, math.nan, random_fs(rng, 2), False)
    with pytest.raises(ValueError):
        Transition(random_fs(rng, 2), 0, 0.0, random_fs(rng, 3), False)


def test_replay_ring_overwrites_oldest():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(4)
    ts = [random_transition(rng, 1) for _ in range(10)]
    for t in ts:
        buf.add(t)
        assert len(buf) <= 4
    assert len(buf) == 4
    # slots hold the last four, in ring order
    assert set(id(t) for t in buf._data) == set(id(t) for t in ts[6:])


def test_replay_sampling_uniform_over_occupied():
    rng = np.random.default_rng(2)
    buf = ReplayBuffer(10)
    ts = [random_transition(rng, 1) for _ in range(5)]
    for t in ts:
        buf.add(t)
    stream = SeededStream(3)
    counts = dict.fromkeys(range(5), 0)
    by_id = {id(t): i for i, t in enumerate(ts)}
    draws = 100_000
    for t in buf.sample(draws, stream):
        counts[by_id[id(t)]] += 1
    chi2 = sum((c - draws / 5) ** 2 / (draws / 5) for c in counts.values())
    assert chi2 < stats.chi2.ppf(0.99, df=4)


def test_replay_sample_reproducible_and_empty_raises():
    rng = np.random.default_rng(4)
    buf = ReplayBuffer(8)
    for _ in range(6):
        buf.add(random_transition(rng, 2))
    a = buf.sample(16, SeededStream(5))
    b = buf.sample(16, SeededStream(5))
    assert [id(t) for t in a] == [id(t) for t in b]
    with pytest.raises(ValueError):
        ReplayBuffer(3).sample(1, SeededStream(0))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


# -------------------------------------------------------------- schedules

def test_alpha_schedule_linear_decay():
    s = AlphaSchedule(0.5, 0.05, 1000)
    assert s.value(0) == 0.5
    assert s.value(500) == pytest.approx(0.275)
    assert s.value(1000) == pytest.approx(0.05, rel=1e-12)
    assert s.value(10_000) == pytest.approx(0.05, rel=1e-12)
    assert s.value(-3) == 0.5  # clamped below


def test_alpha_schedule_validation():
    with pytest.raises(ValueError):
        AlphaSchedule(0.1, 0.5, 100)  # increasing
    with pytest.raises(ValueError):
        AlphaSchedule(0.5, 0.0, 100)
    with pytest.raises(ValueError):
        AlphaSchedule(0.5, 0.1, 0)


def test_train_config_validation():
    TrainConfig()  # defaults valid
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(n_max=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="greedy")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(soft_policy_from="both")


# ------------------------------------------------------------ task sizes

def test_sample_task_degenerate_and_reproducible():
    cfg = TrainConfig(n_max=1, m_max=1)
    stream = SeededStream(6)
    assert all(sample_task(cfg, stream) == (1, 1) for _ in range(20))
    a = [sample_task(TrainConfig(), SeededStream(7)) for _ in range(50)]
    b = [sample_task(TrainConfig(), SeededStream(7)) for _ in range(50)]
    assert a == b


def test_sample_task_uniform_marginals():
    cfg = TrainConfig(n_max=4, m_max=3)
    stream = SeededStream(8)
    draws = 100_000
    pairs = [sample_task(cfg, stream) for _ in range(draws)]
    ns = np.bincount([n for n, _ in pairs], minlength=5)[1:]
    ms = np.bincount([m for _, m in pairs], minlength=4)[1:]
    assert stats.chisquare(ns).pvalue > 0.01
    assert stats.chisquare(ms).pvalue > 0.01
    # independence across the joint grid
    joint = np.zeros((4, 3))
    for n, m in pairs:
        joint[n - 1, m - 1] += 1
    assert stats.chisquare(joint.ravel()).pvalue > 0.01


# ----------------------------------------------------------- policy math

def test_policy_distribution_uniform_and_limits():
    p = policy_distribution(np.full(12, 3.7), alpha=0.5)
    np.testing.assert_allclose(p, 1 / 12, rtol=1e-12)
    q = np.arange(12.0)
    near_uniform = policy_distribution(q, alpha=1e6)
    np.testing.assert_allclose(near_uniform, 1 / 12, atol=1e-4)
    sharp = policy_distribution(q, alpha=1e-4)
    assert sharp[11] > 1.0 - 1e-10


def test_policy_distribution_two_action_example():
    p = policy_distribution(np.array([math.log(3.0), 0.0]), alpha=1.0)
    np.testing.assert_allclose(p, [0.75, 0.25], rtol=1e-12)


def test_policy_distribution_overflow_safe_and_validation():
    p = policy_distribution(np.array([1e8, 1e8 - 1.0]), alpha=1.0)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)
    with pytest.raises(ValueError):
        policy_distribution(np.array([np.inf, 0.0]), 1.0)
    with pytest.raises(ValueError):
        policy_distribution(np.zeros(3), 0.0)


def test_select_action_epsilon_extremes(nets):
    fs = random_fs(np.random.default_rng(9), 2)
    stream = SeededStream(10)
    counts = np.bincount(
        [select_action(fs, nets.online, 1.0, "deterministic", stream,
                       epsilon=1.0) for _ in range(12_000)],
        minlength=12)
    assert stats.chisquare(counts).pvalue > 0.01
    greedy = {select_action(fs, nets.online, 1.0, "deterministic", stream,
                            epsilon=0.0) for _ in range(10)}
    q = (qvalues(fs.to_array()[None], nets.online[0])
         + qvalues(fs.to_array()[None], nets.online[1]))[0]
    assert greedy == {int(np.argmax(q))}
    with pytest.raises(ValueError):
        select_action(fs, nets.online, 1.0, "other", stream)


def test_select_action_stochastic_matches_policy(nets):
    fs = random_fs(np.random.default_rng(11), 3)
    alpha = 0.3
    qmin = np.minimum(qvalues(fs.to_array()[None], nets.online[0]),
                      qvalues(fs.to_array()[None], nets.online[1]))[0]
    p = policy_distribution(qmin, alpha)
    stream = SeededStream(12)
    draws = 100_000
    counts = np.bincount(
        [select_action(fs, nets.online, alpha, "stochastic", stream)
         for _ in range(draws)], minlength=12)
    freq = counts / draws
    sigma = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)


# ------------------------------------------------------------ TD targets

def test_clipped_bootstrap_hand_case():
    # online sums pick a*=1; smaller target there is 2.5
    v = clipped_bootstrap(np.array([0.0, 1.0]), np.array([9.0, 3.0]),
                          np.array([0.0, 2.5]))
    assert v == 2.5
    assert 1.0 + 0.9 * v == pytest.approx(3.25)
    # ties resolve to the lowest index
    assert clipped_bootstrap(np.array([1.0, 1.0]), np.array([4.0, 9.0]),
                             np.array([5.0, 9.0])) == 4.0


def test_soft_state_value_three_action_regression():
    # frozen from an independent plain-python arithmetic pass
    qt1 = np.array([1.0, 2.0, 0.5])
    qt2 = np.array([1.5, 1.0, 0.8])
    v = soft_state_value(qt1, qt2, alpha=0.7)
    assert v == pytest.approx(1.89830099834644, rel=1e-12)
    assert 0.3 + 0.9 * v == pytest.approx(2.008470898511796, rel=1e-12)


def test_soft_state_value_uniform_entropy_bonus():
    qt = np.full(12, 1.25)
    v = soft_state_value(qt, qt, alpha=0.4)
    assert v == pytest.approx(1.25 + 0.4 * math.log(12), rel=1e-12)


def test_targets_terminal_short_circuit(nets):
    rng = np.random.default_rng(13)
    t = random_transition(rng, 2, done=True)
    assert hard_double_q_target(t, nets.online, nets.target, 0.9) == t.r
    assert soft_double_q_target(t, nets.target, 0.5, 0.9) == t.r


def test_soft_target_limits_to_greedy_min_target(nets):
    # alpha -> 0 greedifies w.r.t. the min over TARGET nets
    rng = np.random.default_rng(14)
    for _ in range(50):
        t = random_transition(rng, int(rng.integers(1, 4)))
        F = t.s_next.to_array()[None]
        qt1 = qvalues(F, nets.target[0])[0]
        qt2 = qvalues(F, nets.target[1])[0]
        a_star = int(np.argmax(np.minimum(qt1, qt2)))
        greedy = t.r + 0.9 * min(qt1[a_star], qt2[a_star])
        soft = soft_double_q_target(t, nets.target, 1e-6, 0.9)
        assert soft == pytest.approx(greedy, abs=1e-4)


def test_soft_target_ignores_online_mutation(nets):
    rng = np.random.default_rng(15)
    t = random_transition(rng, 3)
    y = soft_double_q_target(t, nets.target, 0.5, 0.9)
    saved = [p.theta.copy() for p in nets.online]
    for p in nets.online:
        p.theta += 1.0
    try:
        assert soft_double_q_target(t, nets.target, 0.5, 0.9) == y
    finally:
        for p, s in zip(nets.online, saved):
            p.theta[:] = s


def test_soft_target_policy_source_switch(nets):
    rng = np.random.default_rng(16)
    t = random_transition(rng, 2)
    from_target = soft_double_q_target(t, nets.target, 0.5, 0.9)
    from_online = soft_double_q_target(t, nets.target, 0.5, 0.9,
                                       policy_nets=nets.online)
    assert from_target != from_online


def test_huber_branches():
    assert huber(0.0) == 0.0
    assert huber(0.5) == 0.125
    assert huber(2.0) == 1.5
    assert huber(-2.0) == 1.5
    assert huber(1.0) == pytest.approx(0.5)  # continuous at the knee
    np.testing.assert_allclose(huber(np.array([0.0, 0.5, 2.0])),
                               [0.0, 0.125, 1.5])


# --------------------------------------------------------------- updates

def mk_cfg(**kw):
    args = dict(batch_size=4, buffer_capacity=64, total_env_steps=0)
    args.update(kw)
    return TrainConfig(**args)


def fresh_nets(seed=20) -> QNets:
    return QNets.fresh(SMALL, SeededStream(seed))


def fresh_opt(n: QNets, lr=3e-4):
    return (Adam(n.online[0].n_values, lr), Adam(n.online[1].n_values, lr))


def test_adam_first_step_is_signed_lr():
    opt = Adam(3, lr=0.01)
    theta = np.zeros(3)
    opt.step(theta, np.array([1.0, -2.0, 0.0]))
    np.testing.assert_allclose(theta[:2], [-0.01, 0.01], rtol=1e-6)
    assert theta[2] == 0.0


def test_update_step_zero_td_error_leaves_params(nets):
    n = fresh_nets(21)
    n.online = (n.online[0], n.online[0].copy())
    rng = np.random.default_rng(22)
    batch = []
    for _ in range(4):
        s = random_fs(rng, 2)
        a = int(rng.integers(12))
        r = float(qvalues(s.to_array()[None], n.online[0])[0, a])
        batch.append(Transition(s, a, r, random_fs(rng, 2), True))
    before = n.online[0].theta.copy()
    loss = update_step(batch, n, mk_cfg(), alpha=0.5, opt=fresh_opt(n))
    assert loss == 0.0
    np.testing.assert_array_equal(n.online[0].theta, before)


def test_update_step_overfits_single_transition():
    n = fresh_nets(23)
    rng = np.random.default_rng(24)
    batch = [random_transition(rng, 2, done=True)]
    cfg = mk_cfg(learning_rate=1e-2)
    opt = fresh_opt(n, lr=1e-2)
    losses = [update_step(batch, n, cfg, 0.5, opt) for _ in range(100)]
    assert losses[-1] < 0.05 * losses[0]


class _Recorder:
    """Optimizer stand-in that captures the post-clip gradient."""

    def __init__(self):
        self.grads = []

    def step(self, theta, grad):
        self.grads.append(grad.copy())


def test_update_step_clips_global_norm():
    n = fresh_nets(25)
    rng = np.random.default_rng(26)
    batch = [random_transition(rng, 2) for _ in range(8)]
    cfg = mk_cfg(grad_clip_norm=1e-3)
    rec = (_Recorder(), _Recorder())
    update_step(batch, n, cfg, 0.5, rec)
    norm = math.sqrt(sum(float(r.grads[0] @ r.grads[0]) for r in rec))
    assert norm == pytest.approx(1e-3, abs=1e-6)


def test_update_step_matches_per_transition_targets():
    for mode in ("stochastic", "deterministic"):
        n = fresh_nets(27)
        rng = np.random.default_rng(28)
        batch = [random_transition(rng, int(rng.integers(1, 4)))
                 for _ in range(12)]
        cfg = mk_cfg(mode=mode)
        loss = update_step(batch, n, cfg, 0.31, rec := (_Recorder(), _Recorder()))
        assert rec[0].grads  # the update ran
        expected = 0.0
        for t in batch:
            if mode == "stochastic":
                y = soft_double_q_target(t, n.target, 0.31, cfg.gamma)
            else:
                y = hard_double_q_target(t, n.online, n.target, cfg.gamma)
            for p in n.online:
                q = qvalues(t.s.to_array()[None], p)[0, t.a]
                expected += huber(q - y)
        assert loss == pytest.approx(expected / len(batch), rel=1e-10)


def test_update_step_polyak_moves_targets():
    n = fresh_nets(29)
    rng = np.random.default_rng(30)
    batch = [random_transition(rng, 2) for _ in range(4)]
    t_before = n.target[0].theta.copy()
    update_step(batch, n, mk_cfg(tau=0.5), 0.5, fresh_opt(n, lr=1e-2))
    moved = n.target[0].theta - t_before
    toward = n.online[0].theta - t_before
    np.testing.assert_allclose(moved, 0.5 * toward, atol=1e-12)


def test_update_step_divergence_raises():
    n = fresh_nets(31)
    n.online[0].theta[:] = 1e200
    rng = np.random.default_rng(32)
    batch = [random_transition(rng, 1)]
    with pytest.raises(TrainingDivergedError):
        update_step(batch, n, mk_cfg(), 0.5, fresh_opt(n))
    with pytest.raises(ValueError):
        update_step([], fresh_nets(33), mk_cfg(), 0.5, None)


def test_update_step_reward_scale_scales_r():
    rng = np.random.default_rng(34)
    t = random_transition(rng, 2, done=True)
    n1, n2 = fresh_nets(35), fresh_nets(35)
    base = update_step([t], n1, mk_cfg(), 0.5, rec := (_Recorder(), _Recorder()))
    scaled = update_step([t], n2, mk_cfg(reward_scale=0.01), 0.5,
                         (_Recorder(), _Recorder()))
    q = qvalues(t.s.to_array()[None], fresh_nets(35).online[0])[0, t.a]
    assert base == pytest.approx(
        (huber(q - t.r)
         + huber(qvalues(t.s.to_array()[None], fresh_nets(35).online[1])[0, t.a]
                 - t.r)), rel=1e-10)
    assert scaled != base


# ------------------------------------------------------------ collection

def test_collect_episode_counts_and_shared_reward():
    wc = WorldConfig.scaled(3, 2, horizon=7)
    n = fresh_nets(36)
    buf = ReplayBuffer(1000)
    root = SeededStream(37)
    state, first = reset(wc, root.split(0))
    ret = collect_episode(wc, state, first, n, TrainConfig(), buf,
                          root.split(0), root.split(1), alpha=0.5)
    assert len(buf) == 3 * 7
    data = buf._data
    for step_i in range(7):
        rs = {data[step_i * 3 + i].r for i in range(3)}
        assert len(rs) == 1
    assert ret == pytest.approx(sum(data[i * 3].r for i in range(7)))
    # per-agent observation chaining: s' of one step is s of the next
    for i in range(3):
        assert data[3 + i].s == data[i].s_next
    assert all(t.done == (i >= 18) for i, t in enumerate(data))


def test_collect_episode_respects_capacity():
    wc = WorldConfig.scaled(2, 1, horizon=6)
    n = fresh_nets(38)
    buf = ReplayBuffer(5)
    root = SeededStream(39)
    state, first = reset(wc, root.split(0))
    collect_episode(wc, state, first, n, TrainConfig(), buf,
                    root.split(0), root.split(1), alpha=0.5)
    assert len(buf) == 5


# ---------------------------------------------------------------- train

def tiny_train_cfg(**kw):
    args = dict(n_max=2, m_max=2, batch_size=8, buffer_capacity=200,
                total_env_steps=20, eval_interval=10,
                alpha_schedule=AlphaSchedule(0.5, 0.05, 15),
                epsilon_schedule=AlphaSchedule(1.0, 0.1, 15))
    args.update(kw)
    return TrainConfig(**args)


WORLD = dict(horizon=5)


def test_train_zero_budget_initial_checkpoint_only(tmp_path):
    res = train(tiny_train_cfg(total_env_steps=0), SeededStream(40),
                tmp_path, world_overrides=WORLD, net_cfg=SMALL)
    assert len(res.checkpoint_paths) == 1
    assert res.rows == []
    loaded = load_checkpoint(res.checkpoint_paths[0])
    np.testing.assert_array_equal(
        loaded["q1"].theta,
        res.nets.online[0].theta.astype(np.float32).astype(np.float64))
    assert set(loaded) == {"q1", "q2", "q1_target", "q2_target"}


def test_train_deterministic_given_seed(tmp_path):
    r1 = train(tiny_train_cfg(), SeededStream(41), tmp_path / "a",
               world_overrides=WORLD, net_cfg=SMALL)
    r2 = train(tiny_train_cfg(), SeededStream(41), tmp_path / "b",
               world_overrides=WORLD, net_cfg=SMALL)
    assert [r["loss"] for r in r1.rows] == [r["loss"] for r in r2.rows]
    assert [r["online_return"] for r in r1.rows] == \
           [r["online_return"] for r in r2.rows]
    np.testing.assert_array_equal(r1.nets.online[0].theta,
                                  r2.nets.online[0].theta)


def test_train_curve_and_checkpoints(tmp_path):
    cfg = tiny_train_cfg()
    res = train(cfg, SeededStream(42), tmp_path, world_overrides=WORLD,
                net_cfg=SMALL)
    assert res.env_steps == 20
    assert res.curve_path.exists()
    lines = res.curve_path.read_text().strip().splitlines()
    assert lines[0] == "env_steps,episode,n,m,online_return,loss,alpha,epsilon"
    assert len(lines) == 1 + len(res.rows) == 5
    for row in res.rows:
        assert 1 <= row["n"] <= 2 and 1 <= row["m"] <= 2
        assert row["alpha"] == cfg.alpha_schedule.value(
            row["env_steps"] - 5)
    # checkpoints at 0, each 10-step boundary, and the end
    names = sorted(p.name for p in res.checkpoint_paths)
    assert names == ["checkpoint_000000000.qnet", "checkpoint_000000010.qnet",
                     "checkpoint_000000020.qnet"]
    assert len(res.nets.online) == 2 and len(res.nets.target) == 2


def test_train_updates_change_parameters(tmp_path):
    res = train(tiny_train_cfg(), SeededStream(43), tmp_path,
                world_overrides=WORLD, net_cfg=SMALL)
    first = load_checkpoint(res.checkpoint_paths[0])
    assert not np.array_equal(first["q1"].theta, res.nets.online[0].theta)
    assert any(math.isfinite(r["loss"]) for r in res.rows)
