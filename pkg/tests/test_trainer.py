import json

import numpy as np
import pytest

from gpp import diffcore as dc
from gpp.actor_critic import (GPPModel, NetConfig, RiskPreference, batch_rewards, default_risk_grid,
                              policy_forward, value_forward)
from gpp.dataset import Transition, build_transitions, scale_corpus
from gpp.netmodel import NetworkTopology
from gpp.trainer import (TrainConfig, TransitionBatch, actor_step, critic_step, init_state, load_model,
                         td_target, train, train_iteration)

from conftest import D, P

SMALL = dict(heads=2, gat_x_dims=(6, 6), gat_xa_dims=(8, 6), mu_hidden=(8, 4), q_hidden=(8, 4))


@pytest.fixture(scope="module")
def transitions(small_corpus):
    _, skus = small_corpus
    scaled = scale_corpus(skus)
    return build_transitions(scaled, "train", 4), build_transitions(scaled, "val", 4)


def _net(n_lambda=12, **kw):
    return NetConfig(**SMALL, n_lambda=n_lambda, **kw)


def test_config_validation_and_warmup_length():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(eta=-1)
    cfg = TrainConfig(batch_size=4, warmup_epochs=10)
    assert cfg.iters_per_epoch(9) == 3
    assert cfg.warmup_length(9) == 30
    assert TrainConfig(warmup_iters=7).warmup_length(9) == 7
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_batch_rejects_bad_actions(transitions):
    t = transitions[0][0]
    bad = Transition(t.x, t.a[:-1], t.x2, t.a2, t.cap, t.cap2, t.topo, t.topo2)
    with pytest.raises(ValueError):
        TransitionBatch.from_transitions([bad])
    with pytest.raises(ValueError):
        TransitionBatch.from_transitions([])


def test_td_target_arithmetic(transitions):
    net = _net()
    m = GPPModel.init(net, 0)
    b = TransitionBatch.from_transitions(transitions[0][:3])
    grid = default_risk_grid()
    r = batch_rewards(b.x2, b.graph2, grid)
    y0 = td_target(b, m.critic, m.actor, net, 0.0, grid, warmup=True)
    np.testing.assert_array_equal(y0, r)
    a2 = np.broadcast_to(b.a2[:, None, :], (b.a2.shape[0], 12, b.a2.shape[1]))
    q = value_forward(m.critic, net, b.x2, a2, b.graph2).data
    y = td_target(b, m.critic, m.actor, net, 0.95, grid, warmup=True)
    np.testing.assert_allclose(y, r + 0.95 * q, atol=1e-12)


def test_td_target_scalar_example():
    # r = 0.5 from one node; a zero critic output layer with bias atanh(0.1) gives Q = 2.0
    net = NetConfig(**SMALL, n_lambda=1, gamma=0.95)
    m = GPPModel.init(net, 0)
    last = f"q.{len(SMALL['q_hidden'])}"
    m.critic[last + ".W"].data[...] = 0.0
    m.critic[last + ".b"].data[...] = np.arctanh(2.0 * (1 - 0.95))
    topo = NetworkTopology.from_edges([D], [], mot_count=2)
    risk = RiskPreference(1.0, 5.0, 0.5)
    x2 = np.full((1, 4), 0.0)
    x2[0, -1] = 1.0  # 1 - 1 * (1.0 - 0.5) = 0.5
    z = np.zeros((0, 2))
    b = TransitionBatch.from_transitions([Transition(x2, z, x2, z, np.zeros(1), np.zeros(1), topo, topo)])
    y = td_target(b, m.critic, m.actor, net, 0.95, [risk], warmup=True)
    assert y[0, 0] == pytest.approx(2.4, abs=1e-12)


def test_warmup_and_policy_targets_agree_when_policy_replays_log(transitions):
    net = _net(n_lambda=1)
    m = GPPModel.init(net, 2)
    t = transitions[0][0]
    a2 = policy_forward(m.actor, net, t.x2, t.topo2, t.cap2).data[:, 0, :]
    b = TransitionBatch.from_transitions([Transition(t.x, t.a, t.x2, a2, t.cap, t.cap2, t.topo, t.topo2)])
    risks = [RiskPreference(2.0, 10.0, 0.2)]
    y_w = td_target(b, m.critic, m.actor, net, 0.95, risks, warmup=True)
    y_p = td_target(b, m.critic, m.actor, net, 0.95, risks, warmup=False)
    np.testing.assert_allclose(y_w, y_p, atol=1e-12)


def test_critic_step_decreases_loss(transitions):
    net = _net()
    m = GPPModel.init(net, 0)
    b = TransitionBatch.from_transitions(transitions[0][:4])
    target = dc.TargetParams(m.critic)
    y = td_target(b, target, m.actor, net, 0.95, default_risk_grid(), warmup=True)
    opt = dc.OptimizerState(lr=1e-2)
    losses = [critic_step(b, m.critic, y, net, opt) for _ in range(50)]
    assert losses[-1] < losses[0] / 10


def test_critic_step_zero_at_target(transitions):
    net = _net()
    m = GPPModel.init(net, 0)
    b = TransitionBatch.from_transitions(transitions[0][:2])
    a = np.broadcast_to(b.a[:, None, :], (b.a.shape[0], 12, b.a.shape[1]))
    y = value_forward(m.critic, net, b.x, a, b.graph).data
    before = {k: v.copy() for k, v in m.critic.arrays().items()}
    assert critic_step(b, m.critic, y, net, dc.OptimizerState()) == 0.0
    for k, v in m.critic.arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_actor_step_increases_objective(transitions):
    net = _net()
    m = GPPModel.init(net, 1)
    b = TransitionBatch.from_transitions(transitions[0][:4])
    fr = np.array([r.f_ref for r in default_risk_grid()])
    opt = dc.OptimizerState(lr=1e-2)
    critic_before = {k: v.copy() for k, v in m.critic.arrays().items()}
    objs = [actor_step(b, m.actor, m.critic, net, fr, 1.0, opt) for _ in range(50)]
    assert objs[-1] > objs[0]
    for k, v in m.critic.arrays().items():
        np.testing.assert_array_equal(v, critic_before[k])


def test_actor_gradient_zero_without_action_signal(transitions):
    net = _net()
    m = GPPModel.init(net, 1)
    for k in m.critic.names():
        if k.endswith("W2"):
            m.critic[k].data[...] = 0.0
    b = TransitionBatch.from_transitions(transitions[0][:2])
    before = {k: v.copy() for k, v in m.actor.arrays().items()}
    actor_step(b, m.actor, m.critic, net, np.zeros(12), 0.0, dc.OptimizerState())
    assert not any(np.any(g) for g in m.actor.grads().values())
    for k, v in m.actor.arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_regularizer_alone_drives_supply_to_deficit():
    net = NetConfig(k=4, mot_count=2, n_lambda=1)
    m = GPPModel.init(net, 0)
    for k in m.critic.names():
        if k.endswith("W2"):
            m.critic[k].data[...] = 0.0
    topo = NetworkTopology.from_edges([P, D], [(0, 1)], mot_count=2)
    x = np.array([[0.8] * 4, [0.0] * 4])
    cap = np.array([1.0, 0.0])
    z = np.zeros((1, 2))
    b = TransitionBatch.from_transitions([Transition(x, z, x, z, cap, cap, topo, topo)])
    opt = dc.OptimizerState()
    for _ in range(500):
        actor_step(b, m.actor, m.critic, net, np.array([0.3]), 1.0, opt)
    shipped = policy_forward(m.actor, net, x, topo, cap).data.sum()
    assert abs(shipped - 0.3) < 0.05


def test_warmup_purity_and_target_gate(transitions):
    net = _net()
    cfg = TrainConfig(epochs=1, batch_size=4, tau=0.5)
    state = init_state(net, cfg)
    actor0 = {k: v.copy() for k, v in state.model.actor.arrays().items()}
    critic0 = {k: v.copy() for k, v in state.model.critic.arrays().items()}
    grid = default_risk_grid()
    for lo in range(0, 8, 4):
        train_iteration(state, TransitionBatch.from_transitions(transitions[0][lo:lo + 4]), cfg, 2, grid)
    for k, v in state.model.actor.arrays().items():
        np.testing.assert_array_equal(v, actor0[k])
        np.testing.assert_array_equal(state.actor_target[k].data, actor0[k])
    assert any(not np.array_equal(state.critic_target[k].data, critic0[k]) for k in critic0)
    train_iteration(state, TransitionBatch.from_transitions(transitions[0][8:12]), cfg, 2, grid)
    assert any(not np.array_equal(v, actor0[k]) for k, v in state.model.actor.arrays().items())


def test_full_warmup_leaves_actor_at_init(transitions, tmp_path):
    train_set, _ = transitions
    net = _net()
    cfg = TrainConfig(epochs=2, batch_size=8, warmup_iters=2 * TrainConfig(batch_size=8).iters_per_epoch(len(train_set)))
    res = train(train_set, net, cfg)
    init = GPPModel.init(net, cfg.seed)
    for k, v in res.model.actor.arrays().items():
        np.testing.assert_array_equal(v, init.actor[k].data)
    assert all(o is None for o in res.history["actor_objective"])


def test_train_outputs_and_determinism(transitions, tmp_path):
    train_set, val_set = transitions
    net = _net()
    cfg = TrainConfig(epochs=3, batch_size=8, warmup_epochs=1, early_stopping=False)
    r1 = train(train_set, net, cfg, val_set, tmp_path / "a")
    r2 = train(train_set, net, cfg, val_set, tmp_path / "b")
    assert r1.checkpoints == ["epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    for name in r1.checkpoints:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "training.json").read_bytes() == (tmp_path / "b" / "training.json").read_bytes()
    meta = json.loads((tmp_path / "a" / "training.json").read_text())
    assert meta["warmup_iters"] == cfg.iters_per_epoch(len(train_set))
    assert len(meta["history"]["val_td_loss"]) == 3
    assert meta["history"]["warmup"] == [True, False, False]
    loaded = load_model(tmp_path / "a" / "epoch_002.ckpt", net)
    for k, v in r1.model.actor.arrays().items():
        np.testing.assert_array_equal(loaded.actor[k].data, v)
    stores, meta_ck = dc.load_checkpoint(tmp_path / "a" / "epoch_002.ckpt")
    assert set(stores) == {"actor", "critic", "actor_target", "critic_target"}


def test_early_stopping(transitions):
    train_set, val_set = transitions
    cfg = TrainConfig(epochs=6, batch_size=8, warmup_epochs=0, patience=1, min_delta=1e9)
    res = train(train_set, _net(), cfg, val_set)
    # nothing can beat the first post-warmup epoch by 1e9, so it stops one epoch later
    assert res.stopped_epoch == 1 and res.best_epoch == 0


def test_train_errors(transitions):
    with pytest.raises(ValueError):
        train([], _net(), TrainConfig())
    with pytest.raises(ValueError):
        train(transitions[0], _net(gamma=0.9), TrainConfig(gamma=0.95, epochs=1))
    with pytest.raises(ValueError):
        train(transitions[0], _net(n_lambda=3), TrainConfig(epochs=1))


def test_critic_bound_assertion(transitions):
    net = _net()
    m = GPPModel.init(net, 0)
    b = TransitionBatch.from_transitions(transitions[0][:2])
    y = np.zeros((2, 12))
    # a critic near saturation still respects the bound
    last = f"q.{len(SMALL['q_hidden'])}"
    m.critic[last + ".b"].data[...] = 50.0
    loss = critic_step(b, m.critic, y, net, dc.OptimizerState())
    assert np.isfinite(loss)
