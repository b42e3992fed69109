"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gpp import cli
from gpp import diffcore as dc
from gpp import gat
from gpp import simkit as sk
from gpp.actor_critic import (GPPModel, NetConfig, RiskPreference, act, actor_objective, default_risk_grid,
                              node_reward, risk_arrays, td_loss, value_forward)
from gpp.baselines import clamp_to_capability
from gpp.dataset import Transition, scale_corpus
from gpp.gat import GatSpec, embed_x, embed_xa, init_embedding, init_gat
from gpp.netmodel import NetworkTopology
from gpp.synthgen import GenConfig, generate_corpus
from gpp.trainer import TrainConfig, TransitionBatch, actor_step, load_model, train

from conftest import D, P, random_topology

FD_NET = dict(heads=2, gat_x_dims=(5, 4), gat_xa_dims=(6, 4), mu_hidden=(6,), q_hidden=(6,), n_lambda=3)


def _snapshot(rng):
    n = int(rng.integers(3, 7))
    topo = random_topology(rng, n, int(rng.integers(n - 1, 2 * n + 1)), mot_count=2)
    return topo, rng.normal(size=(n, 4))


# 1 ---------------------------------------------------------------------------

def test_criterion_01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = {"gat_x": 0.0, "gat_xa": 0.0, "policy": 0.0, "td": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        topo, x = _snapshot(rng)
        for key, edge_dim in (("gat_x", None), ("gat_xa", 2)):
            for final in (False, True):
                st = dc.ParamStore()
                init_gat(st, "l", GatSpec(4, (3,), 2, edge_dim), rng)
                w = gat.layer_weights(st, "l", 0, 2)
                e = rng.uniform(0, 1, (topo.n_edges, 2))
                proj = rng.normal(size=(topo.n_nodes, 1, 3 if final else 6))
                if edge_dim is None:
                    fn = lambda: dc.tsum(gat.gat_layer_x(x, topo, w, final) * proj)  # noqa: E731
                else:
                    fn = lambda: dc.tsum(gat.gat_layer_xa(x, e, topo, w, final) * proj)  # noqa: E731
                worst[key] = max(worst[key], dc.finite_diff_check(fn, st, h=1e-5))
        # full losses: every parameter array, 25 sampled coordinates each
        net = NetConfig(**FD_NET)
        m = GPPModel.init(net, seed)
        cap = rng.uniform(0.2, 2.0, topo.n_nodes)
        fr = rng.uniform(0, 0.5, net.n_lambda)
        worst["policy"] = max(worst["policy"], dc.finite_diff_check(
            lambda: actor_objective(m.actor, m.critic.frozen(), net, x, topo, cap, fr, 1.0), m.actor, h=1e-5, max_coords=25, rng=rng))
        a = rng.uniform(0, 1, (topo.n_edges, net.n_lambda, 2))
        y = rng.normal(size=(1, net.n_lambda))
        worst["td"] = max(worst["td"], dc.finite_diff_check(
            lambda: td_loss(value_forward(m.critic, net, x, a, topo), y), m.critic, h=1e-5, max_coords=25, rng=rng))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and dt < 60
    verdict(1, ok, "max relative error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {dt:.1f}s")


# 2 ---------------------------------------------------------------------------

def _reward_oracle(f, c1, c2, f_ref):
    if f - f_ref >= 0:
        return max(1 - c1 * (f - f_ref), -1)
    return max(1 - c2 * (f_ref - f), -1)


def test_criterion_02_reward_exactness(verdict):
    grid = np.linspace(-1.0, 2.0, 1000)
    worst, lo, hi = 0.0, np.inf, -np.inf
    for c1, c2, fr in ((2.0, 5.0, 0.2), (1.0, 5.0, 0.4)):
        got = node_reward(grid, RiskPreference(c1, c2, fr))
        ref = np.array([_reward_oracle(f, c1, c2, fr) for f in grid])
        worst = max(worst, float(np.abs(got - ref).max()))
        lo, hi = min(lo, got.min()), max(hi, got.max())
    ok = worst < 1e-12 and lo >= -1 and hi <= 1
    verdict(2, ok, f"max abs error {worst:.1e}, range [{lo:.3f}, {hi:.3f}]")


# 3 ---------------------------------------------------------------------------

def test_criterion_03_capacity_and_conservation(verdict):
    skus = scale_corpus(generate_corpus(GenConfig(sku_count=20, seed=21)))
    rng = np.random.default_rng(0)
    steps = cap_viol = cons_viol = 0
    worst_cons = 0.0
    for sku in skus:
        starts = np.arange(0, 40)
        leads = sk.LeadSampler(sku.lead_hist)
        sim = sk.SimBatch.from_history(sku, starts, sk.pipeline_horizon(sku, leads))
        topo = sim.topo
        for _ in range(13):
            w = sim.weeks
            demand = sku.demand[w]
            cap = sk.capability(sim.inv, demand, sku.is_production)
            raw = rng.uniform(0, 2, (sim.batch, topo.n_edges, topo.mot_count)) * rng.integers(0, 2, (sim.batch, 1, 1))
            a = np.stack([clamp_to_capability(raw[i], topo.src, cap[i]) for i in range(sim.batch)])
            out = np.zeros((sim.batch, sku.n_nodes))
            np.add.at(out.T, topo.src, a.sum(-1).T)
            cap_viol += int((out > cap + 1e-9).sum())
            before = sim.inv.sum(1) + sim.pipe.sum((1, 2))
            prod = sku.production[w]
            oos, _ = sim.step(a, leads.sample(rng, sim.batch), demand, prod)
            after = sim.inv.sum(1) + sim.pipe.sum((1, 2))
            dem = np.where(sku.is_production, 0.0, demand).sum(1)
            resid = np.abs((after - before) - (prod.sum(1) - dem - oos.sum(1)))
            cons_viol += int((resid > 1e-9).sum())
            worst_cons = max(worst_cons, float(resid.max()))
            steps += sim.batch
    ok = steps >= 10_000 and cap_viol == 0 and cons_viol == 0
    verdict(3, ok, f"{steps} steps, capacity violations {cap_viol}, conservation violations {cons_viol} "
                   f"(worst residual {worst_cons:.1e})")


# 4 ---------------------------------------------------------------------------

def test_criterion_04_attention_and_equivariance(verdict):
    rng = np.random.default_rng(4)
    topo, x = _snapshot(rng)
    worst_sum = 0.0
    for edge_dim in (None, 2):
        st = dc.ParamStore()
        init_gat(st, "l", GatSpec(4, (3,), 2, edge_dim), rng)
        w = gat.layer_weights(st, "l", 0, 2)
        if edge_dim is None:
            _, a_s, a_e = gat.gat_layer_x(x, topo, w, return_attention=True)
        else:
            _, a_s, a_e = gat.gat_layer_xa(x, rng.uniform(0, 1, (topo.n_edges, 2)), topo, w, return_attention=True)
        tot = a_s.copy()
        np.add.at(tot, topo.dst, a_e)
        worst_sum = max(worst_sum, float(np.abs(tot - 1).max()))

    spec_x, spec_xa = GatSpec(4, (6, 5), 2), GatSpec(4, (6, 5), 2, edge_dim=2)
    st = dc.ParamStore()
    init_embedding(st, spec_x, rng, "gx")
    init_embedding(st, spec_xa, rng, "gxa")
    a = rng.uniform(0, 1, (topo.n_edges, 3, 2))
    sx = embed_x(st, x, topo, spec_x).data
    sxa = embed_xa(st, x, a, topo, spec_xa).data
    worst_eq = 0.0
    for _ in range(10):
        perm = rng.permutation(topo.n_nodes)  # node v becomes perm[v]
        order = rng.permutation(topo.n_edges)
        kinds = [None] * topo.n_nodes
        for v in range(topo.n_nodes):
            kinds[perm[v]] = topo.kinds[v]
        edges = [(int(perm[topo.src[i]]), int(perm[topo.dst[i]])) for i in order]
        t2 = NetworkTopology.from_edges(kinds, edges, topo.mot_count)
        x2 = np.empty_like(x)
        x2[perm] = x
        sx2 = embed_x(st, x2, t2, spec_x).data
        sxa2 = embed_xa(st, x2, a[order], t2, spec_xa).data
        worst_eq = max(worst_eq, float(np.abs(sx2[perm] - sx).max()), float(np.abs(sxa2[perm] - sxa).max()))
    ok = worst_sum <= 1e-12 and worst_eq <= 1e-10
    verdict(4, ok, f"attention sum error {worst_sum:.1e}, equivariance error {worst_eq:.1e}")


# 5 ---------------------------------------------------------------------------

# Deterministic chain: plant (constant profile 0.6) feeds one DC with zero demand,
# zero lead time and capability 1, so the DC's next profile is f + a.
GAMMA, K = 0.95, 4
RISK = RiskPreference(2.0, 5.0, 0.3)
F_PLANT = 0.6


def _chain_reward(f):
    return node_reward(f, RISK)


def _logged(f):
    return max(RISK.f_ref - f, 0.0)


def _q_closed(f, a):
    """Return of taking ``a`` at ``f`` and then following the logged policy forever."""
    r_plant = _chain_reward(F_PLANT)
    g = f + a
    g_after = max(g, RISK.f_ref)  # the logged policy tops the DC up to f_ref once
    v_next = (_chain_reward(g_after) + r_plant) / (1 - GAMMA)
    return _chain_reward(g) + r_plant + GAMMA * v_next


def test_criterion_05_tiny_mdp(verdict, tmp_path):
    topo = NetworkTopology.from_edges([P, D], [(0, 1)], mot_count=1)
    cap = np.array([1.0, 0.0])

    def state(f):
        return np.array([[F_PLANT] * K, [f] * K])

    fs = np.round(np.linspace(-0.4, 0.7, 23), 6)
    data = []
    for f in fs:
        for a in sorted(set(np.round(np.r_[np.linspace(0, 1, 11), _logged(f)], 6))):
            if f + a > 0.7 + 1e-9:
                continue  # keeps every next state inside the sampled state set
            g = f + a
            data.append(Transition(state(f), np.array([[a]]), state(g), np.array([[_logged(g)]]), cap, cap,
                                   topo, topo))
    net = NetConfig(k=K, mot_count=1, n_lambda=1, gamma=GAMMA, heads=2, gat_x_dims=(16, 16), gat_xa_dims=(32, 16),
                    mu_hidden=(32, 8), q_hidden=(64, 16))
    cfg = TrainConfig(gamma=GAMMA, tau=0.1, eta=1.0, batch_size=8, epochs=600, warmup_epochs=400, lr=1e-3,
                      early_stopping=False, seed=0)
    t0 = time.perf_counter()
    res = train(data, net, cfg, risks=[RISK], out_dir=tmp_path)
    dt = time.perf_counter() - t0
    # the critic evaluates the logged policy while it bootstraps on logged next actions
    critic = load_model(tmp_path / f"epoch_{cfg.warmup_epochs - 1:03d}.ckpt", net).critic
    rel = max(abs(value_forward(critic, net, state(f), np.array([[[_logged(f)]]]), topo).data[0, 0]
                  - _q_closed(f, _logged(f))) / abs(_q_closed(f, _logged(f))) for f in fs)
    act_err = max(abs(act(res.model.actor, net, state(f), topo, cap)[0, 0, 0] - _logged(f)) for f in fs)
    ok = rel < 0.05 and act_err < 0.05 and dt < 300
    verdict(5, ok, f"critic max relative error {rel:.3f}, actor max abs error {act_err:.3f}; {dt:.0f}s")


# 6 ---------------------------------------------------------------------------

def test_criterion_06_regularizer(verdict):
    # one plant with ample stock feeding three DCs at different shortfalls
    topo = NetworkTopology.from_edges([P, D, D, D], [(0, 1), (0, 2), (0, 3)], mot_count=2)
    f = np.array([0.8, 0.2, 0.05, -0.1])
    x = np.repeat(f[:, None], 4, axis=1)
    cap = np.array([2.0, 0.0, 0.0, 0.0])
    risk = RiskPreference(10.0, 10.0, 0.3)
    net = NetConfig(k=4, mot_count=2, n_lambda=1)
    m = GPPModel.init(net, 0)
    # a critic blind to actions leaves the regularizer as the only actor signal
    for name in m.critic.names():
        if name.endswith("W2"):
            m.critic[name].data[...] = 0.0
    batch = TransitionBatch.from_transitions([Transition(x, np.zeros((3, 2)), x, np.zeros((3, 2)), cap, cap,
                                                         topo, topo)])
    opt = dc.OptimizerState(lr=1e-3)
    for _ in range(500):
        actor_step(batch, m.actor, m.critic, net, risk_arrays([risk])[2], 1.0, opt)
    incoming = act(m.actor, net, x, topo, cap)[:, 0].sum(-1)
    resid = np.abs(incoming + np.minimum(f[1:] - risk.f_ref, 0.0))
    verdict(6, float(resid.max()) < 0.05, f"max residual {resid.max():.2e} over DCs, incoming {incoming.round(4)}")


# 7 ---------------------------------------------------------------------------

def test_criterion_07_replay_fidelity(verdict):
    skus = generate_corpus(GenConfig())
    worst = 0.0
    for sku in skus:
        tr = sk.rollout(sku, np.array([0]), sk.ReplayPolicy(sku), sku.weeks, np.random.default_rng(0))
        worst = max(worst, float(np.abs(tr.inventory[0] - sku.inventory[: sku.weeks + 1]).max()))
    verdict(7, worst < 1e-6, f"max inventory deviation {worst:.1e} over {len(skus)} SKUs")


# 8, 9 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data, run = root / "data", root / "run"
    t0 = time.perf_counter()
    for argv in (["gen", "--out", str(data)],
                 ["train", "--data", str(data), "--run", str(run)],
                 ["validate", "--data", str(data), "--run", str(run)],
                 ["evaluate", "--data", str(data), "--run", str(run)],
                 ["report", "--run", str(run)]):
        assert cli.main(argv) == 0, argv
    return run, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_08_desk_benchmark(verdict, desk_run):
    run, dt = desk_run
    ev = json.loads((run / "evaluation.json").read_text())
    rep = json.loads((run / "report.json").read_text())
    res = ev["results"]
    ok, parts = dt < 1800, []
    for o in ev["objectives"]:
        name = o["name"]
        gpp = float(np.sum(res[f"gpp_{name}"]["cost"][name]))
        hist = float(np.sum(res["historical"]["cost"][name]))
        behav = float(np.sum(res["behavioral"]["cost"][name]))
        g_oos = rep["percent"][name][f"gpp_{name}"]["oos"]["mean"][-1]
        r_oos = rep["percent"][name]["rule"]["oos"]["mean"][-1]
        ok &= gpp < hist and g_oos is not None and r_oos is not None and g_oos < r_oos
        parts.append(f"{name}: cost gpp {gpp:.0f} vs logged behavioral {hist:.0f} (simulated {behav:.0f}), "
                     f"%OOS@13 gpp {g_oos:.1f} vs rule {r_oos:.1f}")
    verdict(8, ok, "; ".join(parts) + f"; {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_risk_response(verdict, desk_run):
    run, _ = desk_run
    val = {o["name"]: o for o in json.loads((run / "validation.json").read_text())["objectives"]}
    f1, f5 = val["ratio1"]["risk"]["f_ref"], val["ratio5"]["risk"]["f_ref"]
    for name, o in val.items():
        print(name, "AvgCost per lambda:", " ".join(f"{c:.1f}" for c in o["avg_cost"]))
    verdict(9, f5 >= f1, f"f_ref(ratio5)={f5} vs f_ref(ratio1)={f1}", gated=False)


# 10 --------------------------------------------------------------------------

def _pipeline_hashes(root: Path) -> dict:
    small = ["--set", "gen.sku_count=3", "--set", "gen.train_weeks=10", "--set", "gen.val_weeks=4",
             "--set", "gen.test_weeks=4", "--set", "gen.horizon=6", "--set", "net.k=3"]
    train = ["--set", "train.epochs=2", "--set", "train.warmup_epochs=1", "--set", "net.gat_x_dims=[6,6]",
             "--set", "net.gat_xa_dims=[6,6]", "--set", "net.mu_hidden=[6]", "--set", "net.q_hidden=[6]"]
    sim = ["--set", "sim.j=3", "--set", "sim.z=5"]
    for argv in (["gen", "--out", "data", *small],
                 ["train", "--data", "data", "--run", "run", *small, *train],
                 ["validate", "--data", "data", "--run", "run", *small, *train, *sim],
                 ["evaluate", "--data", "data", "--run", "run", *small, *train, *sim],
                 ["report", "--run", "run"]):
        assert cli.main(argv) == 0, argv
    out = {}
    for d in ("data", "run"):
        for p in sorted((root / d).rglob("*")):
            if p.is_file():
                out[p.relative_to(root).as_posix()] = p.read_bytes()
    return out


def test_criterion_10_determinism(verdict, tmp_path, monkeypatch):
    runs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        runs.append(_pipeline_hashes(tmp_path / name))
    a, b = runs
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    ok = not differ and {"json", "ckpt", "csv"} <= kinds
    verdict(10, ok, f"{len(a)} artifacts compared, {len(differ)} differ {differ[:3]}")
