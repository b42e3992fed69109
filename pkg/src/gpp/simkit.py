"""Monte-Carlo planning, receding-horizon evaluation and cost metrics.

All simulation runs in SKU-scaled units on batches of independent
trajectories that advance in lockstep.  Trajectory ``b`` starts at week
``start[b]``; at step ``j`` it sits in week ``start[b] + j``.  In-transit
stock is a pipeline ``(B, N, H)`` where slot ``d`` arrives ``d`` weeks from now.

Interval dynamics (lost sales; production nodes face no demand)::

    pre = I + S + U - D;   OOS = min(pre, 0);   I' = max(pre, 0) - A;   ES = I'

with ``A`` never exceeding the capability ``max(I - D, 0)`` (``max(I, 0)`` at plants).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import _kernels
from .actor_critic import NetConfig, policy_forward
from .baselines import BehaviorNoise, SourcingTables, behavioral_step, clamp_to_capability, rule_based_step
from .dataset import SkuData
from .diffcore import ParamStore, no_grad
from .netmodel import GraphBatch, NetworkTopology, imbalance_profiles
from .synthgen import wmape_sigma


# --------------------------------------------------------------------------
# objectives and metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostObjective:
    c_es: float
    c_oos: float
    name: str = ""

    def __post_init__(self):
        if self.c_es < 0 or self.c_oos < 0:
            raise ValueError("cost weights must be nonnegative")

    @property
    def label(self) -> str:
        return self.name or f"oos{self.c_oos:g}_es{self.c_es:g}"


DEFAULT_OBJECTIVES = (CostObjective(1.0, 1.0, "ratio1"), CostObjective(1.0, 5.0, "ratio5"))


def total_cost(oos, es, objective: CostObjective, price=1.0) -> float:
    """``sum price * (c_es |ES| + c_oos |OOS|)``."""
    oos = np.abs(np.asarray(oos, dtype=np.float64))
    es = np.abs(np.asarray(es, dtype=np.float64))
    return float(np.sum(np.asarray(price) * (objective.c_es * es + objective.c_oos * oos)))


def select_policy(avg_costs: Sequence[float]) -> int:
    """Index of the smallest average cost; ties go to the lowest index."""
    c = np.asarray(avg_costs, dtype=np.float64)
    if c.size == 0:
        raise ValueError("no candidate policies")
    return int(np.argmin(c))


def validation_loss(costs) -> float:
    """``costs (objectives, weeks, lambdas)`` -> mean over objectives/weeks of the min over lambdas."""
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 3 or c.size == 0:
        raise ValueError("costs must be a non-empty (objectives, weeks, lambdas) array")
    if not np.all(np.isfinite(c)):
        raise ValueError("missing (objective, week, lambda) combinations")
    return float(c.min(axis=2).mean())


def percent_metrics(policy: np.ndarray, historical: np.ndarray) -> list[float | None]:
    """``100 * policy / historical`` per timestep; ``None`` where the baseline is zero."""
    policy = np.asarray(policy, dtype=np.float64)
    historical = np.asarray(historical, dtype=np.float64)
    if policy.shape != historical.shape:
        raise ValueError("policy and baseline must cover the same timesteps")
    return [None if h == 0 else float(100.0 * p / h) for p, h in zip(policy, historical)]


# --------------------------------------------------------------------------
# samplers
# --------------------------------------------------------------------------

class LeadSampler:
    """Per-(edge, MOT) empirical lead-time histograms, sampled by inverse CDF."""

    def __init__(self, lead_hist):
        e = len(lead_hist)
        m = len(lead_hist[0]) if e else 0
        width = max((len(h) for per_edge in lead_hist for h in per_edge), default=1)
        self.values = np.zeros((e, m, width), dtype=np.int64)
        self.cdf = np.ones((e, m, width))
        for i, per_edge in enumerate(lead_hist):
            for k, hist in enumerate(per_edge):
                vals = np.array([l for l, _ in hist], dtype=np.int64)
                p = np.array([q for _, q in hist], dtype=np.float64)
                p = p / p.sum()
                self.values[i, k, : vals.size] = vals
                self.values[i, k, vals.size:] = vals[-1]
                self.cdf[i, k, : vals.size] = np.cumsum(p)
                self.cdf[i, k, vals.size - 1:] = 1.0
        self.max_lead = int(self.values.max()) if self.values.size else 0

    def sample(self, rng: np.random.Generator, batch: int, groups: np.ndarray | None = None) -> np.ndarray:
        e, m, _ = self.values.shape
        u = _grouped(lambda k: rng.random((k, e, m, 1)), batch, groups)
        idx = np.minimum((u > self.cdf[None]).sum(axis=-1), self.values.shape[2] - 1)
        return np.take_along_axis(np.broadcast_to(self.values, (batch,) + self.values.shape), idx[..., None], -1)[..., 0]

    def dominant(self) -> np.ndarray:
        """Most likely lead per (edge, MOT)."""
        p = np.diff(np.concatenate([np.zeros(self.cdf.shape[:2] + (1,)), self.cdf], axis=-1), axis=-1)
        return np.take_along_axis(self.values, np.argmax(p, axis=-1)[..., None], -1)[..., 0]


@dataclass(frozen=True)
class DemandSampler:
    """Forecast-centred demand scenarios: ``forecast * LN(-s^2/2, s)``, ``s`` by horizon step."""

    sigma: tuple[float, ...]

    @classmethod
    def from_wmape(cls, lo: float = 0.30, hi: float = 0.50, horizon: int = 13) -> "DemandSampler":
        return cls(tuple(wmape_sigma(w) for w in np.linspace(lo, hi, horizon)))

    def sigma_for(self, steps: int, offset: int = 0) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=np.float64)
        idx = np.minimum(np.arange(offset, offset + steps), s.size - 1)
        return s[idx]

    def sample(self, rng: np.random.Generator, forecast: np.ndarray, z: int,
               groups: np.ndarray | None = None) -> np.ndarray:
        """``forecast (B, N, S)`` -> scenarios ``(B, z, N, S)``.

        Trajectories sharing a ``groups`` label share their noise draws.
        """
        b, n, s = forecast.shape
        sig = self.sigma_for(s)
        eps = _grouped(lambda m: rng.standard_normal((m, z, n, s)), b, groups)
        return forecast[:, None] * np.exp(sig * eps - 0.5 * sig * sig)


def _grouped(draw, batch: int, groups: np.ndarray | None) -> np.ndarray:
    """``draw(m)`` once per distinct group, gathered back to ``batch`` rows."""
    if groups is None:
        return draw(batch)
    labels, inv = np.unique(groups, return_inverse=True)
    return draw(labels.size)[inv]


@dataclass(frozen=True)
class ShippingConstraints:
    """Optional post-processing: per-MOT lane capacity and minimum order quantities.

    ``capacity[m]`` caps each lane's MOT-``m`` quantity; shipments below
    ``moq[m]`` are cancelled; ``quantum[m] > 0`` rounds quantities down to a
    multiple.  Every operation only reduces quantities, so capability limits
    stay satisfied.
    """

    capacity: tuple[float, ...] | None = None
    moq: tuple[float, ...] | None = None
    quantum: tuple[float, ...] | None = None

    def apply(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=np.float64)
        if self.capacity is not None:
            out = np.minimum(out, np.asarray(self.capacity))
        if self.quantum is not None:
            q = np.asarray(self.quantum, dtype=np.float64)
            safe = np.where(q > 0, q, 1.0)
            out = np.where(q > 0, np.floor(out / safe + 1e-12) * safe, out)
        if self.moq is not None:
            out = np.where(out < np.asarray(self.moq), 0.0, out)
        return out


# --------------------------------------------------------------------------
# batched simulator
# --------------------------------------------------------------------------

def capability(inv: np.ndarray, demand: np.ndarray, is_production: np.ndarray) -> np.ndarray:
    return np.maximum(inv - np.where(is_production, 0.0, demand), 0.0)


@dataclass
class SimBatch:
    sku: SkuData
    topo: NetworkTopology
    start: np.ndarray
    inv: np.ndarray
    pipe: np.ndarray
    j: int = 0
    produced: float = 0.0
    demanded: float = 0.0
    lost: float = 0.0

    @classmethod
    def from_history(cls, sku: SkuData, starts, horizon: int = 16) -> "SimBatch":
        starts = np.asarray(starts, dtype=np.int64)
        b, n = starts.size, sku.n_nodes
        pipe = np.zeros((b, n, horizon))
        log = sku.shipments
        arr = log.arrival
        for i, t in enumerate(starts):
            m = (log.send < t) & (arr >= t)
            if np.any(arr[m] - t >= horizon):
                raise ValueError("pipeline horizon shorter than an in-flight lead time")
            np.add.at(pipe[i], (log.dst[m], arr[m] - t), log.qty[m])
        return cls(sku, sku.topology_at(int(starts.min()) if b else 0), starts,
                   sku.inventory[starts].copy(), pipe)

    @property
    def batch(self) -> int:
        return self.start.size

    @property
    def weeks(self) -> np.ndarray:
        return self.start + self.j

    def on_hand_plus_transit(self) -> float:
        return float(self.inv.sum() + self.pipe.sum())

    def step(self, action: np.ndarray, leads: np.ndarray, demand: np.ndarray, production: np.ndarray):
        """Advance one interval; returns ``(oos, es)`` each ``(B, N)``."""
        topo = self.topo
        if action.shape != (self.batch, topo.n_edges, topo.mot_count):
            raise ValueError(f"action shape {action.shape} does not match the batch")
        if leads.size and (leads.min() < 0 or leads.max() >= self.pipe.shape[2]):
            raise ValueError("lead time outside pipeline horizon")
        prod = self.sku.is_production
        demand = np.where(prod, 0.0, demand)
        _kernels.scatter_arrivals(self.pipe, topo.dst, action, leads)
        arriving = self.pipe[:, :, 0]
        pre = self.inv + arriving + production - demand
        oos = np.minimum(pre, 0.0)
        shipped = np.zeros_like(self.inv)
        if topo.n_edges:
            shipped = _kernels.segment_sum(action.sum(axis=2).T, topo.src, topo.n_nodes).T
        inv = np.maximum(pre, 0.0) - shipped
        self.produced += float(production.sum())
        self.demanded += float(demand.sum())
        self.lost += float(oos.sum())
        self.inv = inv
        self.pipe[:, :, :-1] = self.pipe[:, :, 1:]
        self.pipe[:, :, -1] = 0.0
        self.j += 1
        return oos, np.maximum(inv, 0.0)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class StepPolicy(Protocol):
    def act(self, sim: SimBatch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        ...


def _week_slice(arr: np.ndarray, weeks: np.ndarray, steps: int) -> np.ndarray:
    """``arr (W, N)`` -> ``(B, N, steps)`` rows ``weeks + s``, zero past the end."""
    w, n = arr.shape
    idx = weeks[:, None] + np.arange(steps)[None, :]
    ok = idx < w
    out = arr[np.minimum(idx, w - 1)]  # (B, steps, N)
    out = np.where(ok[..., None], out, 0.0)
    return out.transpose(0, 2, 1)


def planning_features(sim: SimBatch, demand_paths: np.ndarray, k: int, production: np.ndarray | None = None):
    """States for MC scenarios: ``demand_paths (B, Z, N, >=k-1)`` -> ``x (B, Z, N, k)``.

    In-flight arrivals come from the simulated pipeline; production is the
    planned (logged) schedule unless ``production (B, N, k-1)`` is given.
    """
    sku = sim.sku
    if production is None:
        production = _week_slice(sku.production, sim.weeks, k - 1)
    incoming = production.copy()
    h = min(k - 1, sim.pipe.shape[2])  # nothing is in flight beyond the pipeline
    incoming[:, :, :h] += sim.pipe[:, :, :h]
    d = np.where(sku.is_production[None, None, :, None], 0.0, demand_paths[..., : k - 1])
    return imbalance_profiles(sim.inv[:, None, :], incoming[:, None], d)


class GPPPolicy:
    """Receding-horizon GPP step: average the policy's first-interval plan over Z scenarios.

    ``lam`` gives the risk-preference index per trajectory.  Only the first
    interval of each plan is executed, so only it is computed.
    """

    def __init__(self, actor: ParamStore, cfg: NetConfig, lam, z: int, demand: DemandSampler,
                 max_graphs: int = 96, groups=None):
        self.actor = actor
        self.cfg = cfg
        self.lam = np.asarray(lam, dtype=np.int64)
        self.z = z
        self.demand = demand
        self.max_graphs = max_graphs
        self.groups = None if groups is None else np.asarray(groups)

    def plan_first(self, sim: SimBatch, rng: np.random.Generator) -> np.ndarray:
        sku, k, z = sim.sku, self.cfg.k, self.z
        fc = _week_slice_3d(sku.forecast, sim.weeks, k - 1)
        paths = self.demand.sample(rng, fc, z, self.groups)  # (B, Z, N, k-1)
        x = planning_features(sim, paths, k)
        cap = capability(sim.inv[:, None, :], paths[..., 0], sku.is_production)
        acts = batched_actions(self.actor, self.cfg, sim.topo, x.reshape(-1, sim.topo.n_nodes, k),
                               cap.reshape(-1, sim.topo.n_nodes), self.max_graphs)
        acts = acts.reshape(sim.batch, z, sim.topo.n_edges, self.cfg.n_lambda, self.cfg.mot_count)
        chosen = acts[np.arange(sim.batch), :, :, self.lam]  # (B, Z, E, M)
        return chosen.mean(axis=1)

    def act(self, sim: SimBatch, rng: np.random.Generator):
        return self.plan_first(sim, rng), None


def _week_slice_3d(forecast: np.ndarray, weeks: np.ndarray, steps: int) -> np.ndarray:
    """Forecasts issued in each trajectory's current week, first ``steps`` horizon entries."""
    w = forecast.shape[0]
    f = forecast[np.minimum(weeks, w - 1)]
    h = f.shape[2]
    if steps <= h:
        return f[:, :, :steps].copy()
    pad = np.repeat(f[:, :, -1:], steps - h, axis=2)
    return np.concatenate([f, pad], axis=2)


def batched_actions(actor: ParamStore, cfg: NetConfig, topo: NetworkTopology, x: np.ndarray,
                    cap: np.ndarray, max_graphs: int = 96) -> np.ndarray:
    """Policy on ``G`` copies of one topology; ``x (G, N, K)`` -> ``(G, E, Lambda, M)``."""
    g = x.shape[0]
    n, e = topo.n_nodes, topo.n_edges
    out = np.empty((g, e, cfg.n_lambda, cfg.mot_count))
    if e == 0:
        return out
    with no_grad():
        for lo in range(0, g, max_graphs):
            hi = min(lo + max_graphs, g)
            graph = GraphBatch.tile(topo, hi - lo)
            a = policy_forward(actor, cfg, x[lo:hi].reshape(-1, x.shape[-1]), graph, cap[lo:hi].reshape(-1)).data
            out[lo:hi] = a.reshape(hi - lo, e, cfg.n_lambda, cfg.mot_count)
    return out


class RulePolicy:
    """Safety-stock rule (optionally with behavioral noise) applied per trajectory."""

    def __init__(self, tables: SourcingTables, noise: BehaviorNoise | None = None):
        self.tables = tables
        self.noise = noise

    def act(self, sim: SimBatch, rng: np.random.Generator):
        sku = sim.sku
        prod = sku.is_production
        out = np.zeros((sim.batch, sim.topo.n_edges, sim.topo.mot_count))
        for b, w in enumerate(sim.weeks):
            cap = capability(sim.inv[b], sku.demand[w], prod)
            fc = sku.forecast[w]
            if self.noise is None:
                out[b] = rule_based_step(sim.inv[b], cap, fc, sku.dos, sim.topo, self.tables, rng, prod)
            else:
                out[b] = behavioral_step(sim.inv[b], cap, fc, sku.dos, sim.topo, self.tables, rng, self.noise, prod)
        return out, None


class ReplayPolicy:
    """Logged actions with their logged lead times."""

    def __init__(self, sku: SkuData):
        topo = sku.topology
        w = sku.weeks
        self.qty = np.zeros((w, topo.n_edges, topo.mot_count))
        self.lead = np.zeros((w, topo.n_edges, topo.mot_count), dtype=np.int64)
        idx = topo.edge_index()
        log = sku.shipments
        for i in range(len(log)):
            t = int(log.send[i])
            if 0 <= t < w:
                e = idx[(int(log.src[i]), int(log.dst[i]))]
                if self.qty[t, e, log.mot[i]] > 0:
                    raise ValueError("replay needs at most one shipment per (week, edge, MOT)")
                self.qty[t, e, log.mot[i]] = log.qty[i]
                self.lead[t, e, log.mot[i]] = log.lead[i]

    def act(self, sim: SimBatch, rng: np.random.Generator):
        return self.qty[sim.weeks].copy(), self.lead[sim.weeks].copy()


# --------------------------------------------------------------------------
# rollouts
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    sku: str
    starts: np.ndarray
    oos: np.ndarray  # (B, J, N) scaled units
    es: np.ndarray
    inventory: np.ndarray  # (B, J + 1, N)
    actions: np.ndarray | None = None
    conservation_error: float = 0.0


def pipeline_horizon(sku: SkuData, leads: LeadSampler) -> int:
    log = sku.shipments
    logged = int(log.lead.max()) if len(log) else 0
    return max(logged, leads.max_lead) + 2


def rollout(sku: SkuData, starts, policy: StepPolicy, steps: int, rng: np.random.Generator,
            constraints: ShippingConstraints | None = None, keep_actions: bool = False,
            groups=None) -> Trajectory:
    """Execute ``policy`` for ``steps`` intervals from each start week against actual demand.

    Trajectories with equal ``groups`` labels share sampled execution lead times.
    """
    leads = LeadSampler(sku.lead_hist)
    sim = SimBatch.from_history(sku, starts, pipeline_horizon(sku, leads))
    prod = sku.is_production
    b, n = sim.batch, sku.n_nodes
    oos = np.zeros((b, steps, n))
    es = np.zeros((b, steps, n))
    inv = np.zeros((b, steps + 1, n))
    inv[:, 0] = sim.inv
    acts = np.zeros((b, steps, sim.topo.n_edges, sim.topo.mot_count)) if keep_actions else None
    stock0 = sim.on_hand_plus_transit()
    for j in range(steps):
        w = sim.weeks
        if w.max() >= sku.weeks:
            raise ValueError("evaluation runs past the recorded actuals")
        demand = sku.demand[w]
        a, lt = policy.act(sim, rng)
        cap = capability(sim.inv, demand, prod)
        a = np.stack([clamp_to_capability(a[i], sim.topo.src, cap[i]) for i in range(b)]) if b else a
        if constraints is not None:
            a = constraints.apply(a)
        if lt is None:
            lt = leads.sample(rng, b, None if groups is None else np.asarray(groups))
        o, e = sim.step(a, lt, demand, sku.production[w])
        oos[:, j], es[:, j], inv[:, j + 1] = o, e, sim.inv
        if keep_actions:
            acts[:, j] = a
    err = abs((sim.on_hand_plus_transit() - stock0) - (sim.produced - sim.demanded - sim.lost))
    return Trajectory(sku.sku, np.asarray(starts), oos, es, inv, acts, err)


def historical_trajectory(sku: SkuData, starts, steps: int) -> Trajectory:
    """Logged outcomes arranged like a rollout (no simulation)."""
    starts = np.asarray(starts, dtype=np.int64)
    oos_all, es_all = sku.logged_outcomes()
    idx = starts[:, None] + np.arange(steps)[None, :]
    inv_idx = starts[:, None] + np.arange(steps + 1)[None, :]
    return Trajectory(sku.sku, starts, oos_all[idx], es_all[idx], sku.inventory[inv_idx])


def dc_costs(traj: Trajectory, sku: SkuData, objective: CostObjective) -> np.ndarray:
    """Per (start, timestep) money cost over distribution nodes, raw units: ``(B, J)``."""
    dc = ~sku.is_production
    unit = sku.price * sku.scale
    return unit * (objective.c_es * np.abs(traj.es[:, :, dc]).sum(-1) + objective.c_oos * np.abs(traj.oos[:, :, dc]).sum(-1))


def dc_totals(traj: Trajectory, sku: SkuData) -> tuple[np.ndarray, np.ndarray]:
    """Per (start, timestep) raw-unit ES and OOS summed over distribution nodes."""
    dc = ~sku.is_production
    return sku.scale * np.abs(traj.es[:, :, dc]).sum(-1), sku.scale * np.abs(traj.oos[:, :, dc]).sum(-1)


# --------------------------------------------------------------------------
# full Monte-Carlo plan
# --------------------------------------------------------------------------

@dataclass
class PlanResult:
    avg_cost: np.ndarray  # (Lambda,) per objective given at call time
    plan: np.ndarray  # (Lambda, J, E, M) averaged actions, scaled units
    selected: int
    cost_samples: np.ndarray  # (Lambda, Z)


def plan(sku: SkuData, week: int, actor: ParamStore, cfg: NetConfig, objective: CostObjective,
         j_steps: int = 13, z: int = 50, demand: DemandSampler | None = None,
         rng: np.random.Generator | None = None, lambdas: Sequence[int] | None = None,
         max_graphs: int = 96) -> PlanResult:
    """Monte-Carlo J-interval rollout of every preference from one state.

    Demand scenarios are drawn once at ``week`` for weeks
    ``week .. week + J + K - 3`` (beyond the forecast horizon the last step is
    reused) and shared by all preferences, as are new-shipment lead times.
    Costs accumulate over distribution nodes each interval.
    """
    rng = rng or np.random.default_rng(0)
    demand = demand or DemandSampler.from_wmape()
    lams = np.arange(cfg.n_lambda) if lambdas is None else np.asarray(lambdas, dtype=np.int64)
    nl, k = lams.size, cfg.k
    topo = sku.topology_at(week)
    leads = LeadSampler(sku.lead_hist)
    span = j_steps + k - 2
    fc = _week_slice_3d(sku.forecast, np.array([week]), span)  # (1, N, span)
    paths = demand.sample(rng, fc, z)[0]  # (Z, N, span)
    lead_draws = np.stack([leads.sample(rng, z) for _ in range(j_steps)])  # (J, Z, E, M)
    sim = SimBatch.from_history(sku, np.full(nl * z, week), pipeline_horizon(sku, leads))
    prod = sku.is_production
    dc = ~prod
    unit = sku.price * sku.scale
    cost = np.zeros((nl, z))
    plan_acts = np.zeros((nl, j_steps, topo.n_edges, topo.mot_count))
    all_paths = np.broadcast_to(paths[None], (nl, z) + paths.shape[1:]).reshape(nl * z, *paths.shape[1:])
    for j in range(j_steps):
        w = sim.weeks
        d_now = all_paths[:, :, j:j + k - 1]
        production = _week_slice(sku.production, w, k - 1)
        x = planning_features(sim, d_now[:, None], k, production)[:, 0]
        cap = capability(sim.inv, d_now[:, :, 0], prod)
        a = batched_actions(actor, cfg, topo, x, cap, max_graphs)  # (L*Z, E, Lambda, M)
        a = a.reshape(nl, z, topo.n_edges, cfg.n_lambda, cfg.mot_count)[np.arange(nl), :, :, lams]
        plan_acts[:, j] = a.mean(axis=1)
        a = a.reshape(nl * z, topo.n_edges, cfg.mot_count)
        lt = np.broadcast_to(lead_draws[j][None], (nl,) + lead_draws[j].shape).reshape(nl * z, topo.n_edges, cfg.mot_count)
        o, e = sim.step(a, lt, d_now[:, :, 0], production[:, :, 0])
        step_cost = unit * (objective.c_es * e[:, dc].sum(-1) + objective.c_oos * np.abs(o[:, dc]).sum(-1))
        cost += step_cost.reshape(nl, z)
    avg = cost.mean(axis=1)
    return PlanResult(avg, plan_acts, int(lams[select_policy(avg)]), cost)


# --------------------------------------------------------------------------
# corpus-level evaluation
# --------------------------------------------------------------------------

HIST_EDGES = np.linspace(-2.0, 2.0, 41)


def imbalance_histogram(traj: Trajectory, sku: SkuData, edges: np.ndarray = HIST_EDGES) -> np.ndarray:
    """Counts of signed DC imbalance ``ES + OOS`` (scaled units) per timestep, ``(J, bins)``.

    Values outside the edges land in the first or last bin.
    """
    dc = ~sku.is_production
    v = (traj.es + traj.oos)[:, :, dc]  # at most one of the two is nonzero
    j = v.shape[1]
    out = np.zeros((j, edges.size - 1), dtype=np.int64)
    for i in range(j):
        idx = np.clip(np.searchsorted(edges, v[:, i].reshape(-1), side="right") - 1, 0, edges.size - 2)
        out[i] = np.bincount(idx, minlength=edges.size - 1)
    return out


@dataclass
class EvalResult:
    """Weekly-averaged network aggregates per run and timestep (raw units, DC nodes)."""

    name: str
    es: np.ndarray  # (R, J)
    oos: np.ndarray  # (R, J)
    cost: dict  # objective label -> (R, J)
    histogram: np.ndarray  # (J, bins) summed over runs
    conservation_error: float = 0.0

    @property
    def runs(self) -> int:
        return self.es.shape[0]


def split_starts(sku: SkuData, split: str, steps: int) -> np.ndarray:
    lo, hi = sku.splits[split]
    starts = np.arange(lo, hi)
    if starts.size and starts[-1] + steps > sku.weeks:
        raise ValueError(f"{sku.sku}: {split} starts need actuals through week {starts[-1] + steps - 1}")
    return starts


def _accumulate(per_sku: list[tuple[SkuData, Trajectory]], objectives: Sequence[CostObjective]):
    es = oos = None
    cost = {o.label: None for o in objectives}
    hist = None
    err = 0.0
    for sku, tr in per_sku:
        e, o = dc_totals(tr, sku)
        es = e.mean(0) if es is None else es + e.mean(0)
        oos = o.mean(0) if oos is None else oos + o.mean(0)
        for obj in objectives:
            c = dc_costs(tr, sku, obj).mean(0)
            cost[obj.label] = c if cost[obj.label] is None else cost[obj.label] + c
        h = imbalance_histogram(tr, sku)
        hist = h if hist is None else hist + h
        err = max(err, tr.conservation_error)
    return es, oos, cost, hist, err


def evaluate(skus: Sequence[SkuData], policy_factory: Callable[[SkuData, np.ndarray], StepPolicy],
             split: str = "test", steps: int = 13, runs: int = 1, seed: int = 0,
             objectives: Sequence[CostObjective] = DEFAULT_OBJECTIVES,
             constraints: ShippingConstraints | None = None, name: str = "policy") -> EvalResult:
    """Receding-horizon evaluation from every start week of ``split`` for every SKU."""
    if not skus:
        raise ValueError("no SKUs to evaluate")
    es_r, oos_r, cost_r, hist, err = [], [], {o.label: [] for o in objectives}, None, 0.0
    for r in range(runs):
        per_sku = []
        for i, sku in enumerate(skus):
            starts = split_starts(sku, split, steps)
            rng = np.random.default_rng([seed, r, i])
            per_sku.append((sku, rollout(sku, starts, policy_factory(sku, starts), steps, rng, constraints)))
        es, oos, cost, h, e = _accumulate(per_sku, objectives)
        es_r.append(es)
        oos_r.append(oos)
        for k, v in cost.items():
            cost_r[k].append(v)
        hist = h if hist is None else hist + h
        err = max(err, e)
    return EvalResult(name, np.array(es_r), np.array(oos_r), {k: np.array(v) for k, v in cost_r.items()}, hist, err)


def historical(skus: Sequence[SkuData], split: str = "test", steps: int = 13,
               objectives: Sequence[CostObjective] = DEFAULT_OBJECTIVES) -> EvalResult:
    """The logged outcomes aggregated exactly like ``evaluate``."""
    per_sku = [(s, historical_trajectory(s, split_starts(s, split, steps), steps)) for s in skus]
    es, oos, cost, hist, _ = _accumulate(per_sku, objectives)
    return EvalResult("historical", es[None], oos[None], {k: v[None] for k, v in cost.items()}, hist)


def gpp_factory(actor: ParamStore, cfg: NetConfig, lam: int, z: int = 50,
                demand: DemandSampler | None = None, max_graphs: int = 96):
    demand = demand or DemandSampler.from_wmape()

    def make(sku: SkuData, starts: np.ndarray) -> GPPPolicy:
        return GPPPolicy(actor, cfg, np.full(starts.size, lam), z, demand, max_graphs)

    return make


def rule_factory(noise: BehaviorNoise | None = None, train_split: str = "train"):
    """Rule policy with sourcing shares estimated from each SKU's training log."""

    def make(sku: SkuData, starts: np.ndarray) -> RulePolicy:
        lo, hi = sku.splits[train_split]
        return RulePolicy(SourcingTables.from_log(sku.topology, sku.shipments, range(lo, hi)), noise)

    return make


def percent_table(policy: EvalResult, baseline: EvalResult, objective: CostObjective) -> dict:
    """Per-timestep %ES, %OOS, %Cost (mean and SD over runs); ``None`` marks a zero baseline."""
    out = {}
    base = {"es": baseline.es.mean(0), "oos": baseline.oos.mean(0), "cost": baseline.cost[objective.label].mean(0)}
    vals = {"es": policy.es, "oos": policy.oos, "cost": policy.cost[objective.label]}
    for key in ("es", "oos", "cost"):
        runs = [percent_metrics(v, base[key]) for v in vals[key]]
        mean, sd = [], []
        for j in range(base[key].size):
            col = [r[j] for r in runs]
            if any(c is None for c in col):
                mean.append(None)
                sd.append(None)
            else:
                mean.append(float(np.mean(col)))
                sd.append(float(np.std(col)))
        out[key] = {"mean": mean, "sd": sd}
    return out


# --------------------------------------------------------------------------
# preference selection on the validation period
# --------------------------------------------------------------------------

@dataclass
class ValidationResult:
    costs: np.ndarray  # (objectives, weeks, lambdas) timestep-J cost summed over SKUs
    objectives: list
    lambda_star: list[int]
    loss: float

    @property
    def avg_cost(self) -> np.ndarray:
        return self.costs.mean(axis=1)


def validate(skus: Sequence[SkuData], actor: ParamStore, cfg: NetConfig,
             objectives: Sequence[CostObjective] = DEFAULT_OBJECTIVES, steps: int = 13, z: int = 50,
             seed: int = 0, split: str = "val", demand: DemandSampler | None = None,
             max_graphs: int = 96, lambdas: Sequence[int] | None = None) -> ValidationResult:
    """Evaluate every preference from every validation week and pick the cheapest per objective.

    The cost compared is the one at the last timestep (``t + J - 1``), summed
    over SKUs.  All preferences share demand scenarios and lead-time draws.
    """
    demand = demand or DemandSampler.from_wmape()
    lams = np.arange(cfg.n_lambda) if lambdas is None else np.asarray(lambdas, dtype=np.int64)
    nl = lams.size
    costs = None
    for i, sku in enumerate(skus):
        starts = split_starts(sku, split, steps)
        t = starts.size
        rep = np.tile(starts, nl)
        lam = np.repeat(lams, t)
        groups = np.tile(np.arange(t), nl)
        pol = GPPPolicy(actor, cfg, lam, z, demand, max_graphs, groups)
        tr = rollout(sku, rep, pol, steps, np.random.default_rng([seed, i]), groups=groups)
        c = np.stack([dc_costs(tr, sku, o)[:, -1].reshape(nl, t).T for o in objectives])
        costs = c if costs is None else costs + c
    if costs is None:
        raise ValueError("no SKUs to validate on")
    star = [int(lams[select_policy(costs[o].mean(axis=0))]) for o in range(len(objectives))]
    return ValidationResult(costs, list(objectives), star, validation_loss(costs))
