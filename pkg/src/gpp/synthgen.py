"""Synthetic stand-in corpus: topologies, demand/production, forecasts, logged history.

Everything is generated in raw units from one seed.  The history roll-forward
is written with explicit per-node loops so that it serves as an independent
reference for the vectorised simulator in :mod:`gpp.simkit`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from .baselines import BehaviorNoise, SourcingTables, behavioral_step
from .dataset import SkuData
from .netmodel import NetworkTopology, NodeKind, ShipmentLog


@dataclass(frozen=True)
class GenConfig:
    sku_count: int = 20
    node_median: float = 9.0
    node_sigma: float = 0.45
    node_range: tuple[int, int] = (2, 20)
    edges_per_node: float = 2.2
    max_edges: int = 60
    mot_names: tuple[str, ...] = ("truckload", "intermodal")
    truckload_share: float = 0.8
    train_weeks: int = 60
    val_weeks: int = 13
    test_weeks: int = 13
    horizon: int = 13
    k: int = 4
    burn_in: int = 12
    demand_median: float = 100.0
    demand_sigma: float = 0.6
    season_amp: float = 0.25
    demand_noise: float = 0.2
    wmape: tuple[float, float] = (0.30, 0.50)
    dos_range: tuple[float, float] = (2.0, 4.0)
    transfer_weight: float = 0.15
    plant_cover_weeks: float = 1.5
    production_gain: float = 0.5
    production_noise: float = 0.05
    price_median: float = 5.0
    price_sigma: float = 0.5
    noise: BehaviorNoise = field(default_factory=BehaviorNoise)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.node_range
        if not 1 <= lo <= hi:
            raise ValueError("invalid node range")
        if self.sku_count < 1:
            raise ValueError("sku_count must be >= 1")
        if self.train_weeks < 2 or self.val_weeks < 2 or self.test_weeks < 1:
            raise ValueError("splits too short")
        if self.demand_median <= 0:
            raise ValueError("demand level must be positive (production is sized from demand)")
        if not 0 <= self.wmape[0] <= self.wmape[1] < 2:
            raise ValueError("wmape profile must be nondecreasing within [0, 2)")

    @property
    def weeks(self) -> int:
        """Stored weeks: the three splits plus the lookahead a test start needs."""
        return self.train_weeks + self.val_weeks + self.test_weeks + self.horizon + self.k - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = asdict(self.noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = BehaviorNoise(**d["noise"])
        for key in ("node_range", "mot_names", "wmape", "dos_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def full_scale(cls, **kw) -> "GenConfig":
        """Paper-proportioned splits: 78 train, 17 validation, 26 test weeks."""
        return cls(train_weeks=78, val_weeks=17, test_weeks=26, **kw)


@dataclass
class World:
    """Ground truth for one SKU before any policy acts."""

    sku: str
    kinds: list[NodeKind]
    topo: NetworkTopology
    lead_hist: list[list[list[tuple[int, float]]]]
    sourcing: SourcingTables
    dos: np.ndarray
    base: np.ndarray
    phase: float
    price: float
    plant_share: np.ndarray


def _sample_node_count(cfg: GenConfig, rng) -> int:
    lo, hi = cfg.node_range
    n = int(round(cfg.node_median * math.exp(cfg.node_sigma * rng.standard_normal())))
    return int(min(max(n, lo), hi))


def gen_topology(n: int, cfg: GenConfig, rng) -> tuple[list[NodeKind], NetworkTopology]:
    """DAG with plants ``0..p-1``: every DC has a plant parent, extra lanes go low -> high index."""
    if n == 1:
        return [NodeKind.PRODUCTION], NetworkTopology.from_edges([NodeKind.PRODUCTION], [], len(cfg.mot_names))
    p = 1 if n < 6 else int(rng.integers(1, max(2, n // 5) + 1))
    kinds = [NodeKind.PRODUCTION] * p + [NodeKind.DISTRIBUTION] * (n - p)
    edges = set()
    for v in range(p, n):
        # every DC has a plant lane; DC-to-DC transfer lanes are added below
        edges.add((int(rng.integers(0, p)), v))
    possible = [(u, v) for v in range(p, n) for u in range(v) if (u, v) not in edges]
    target = int(round(cfg.edges_per_node * n * math.exp(0.25 * rng.standard_normal())))
    target = min(max(target, len(edges)), cfg.max_edges, len(edges) + len(possible))
    extra = target - len(edges)
    if extra > 0:
        pick = rng.choice(len(possible), size=extra, replace=False)
        edges.update(possible[i] for i in pick)
    return kinds, NetworkTopology.from_edges(kinds, sorted(edges), len(cfg.mot_names))


def _lead_hist(rng, m: int) -> list[list[tuple[int, float]]]:
    base = int(rng.choice([0, 1, 2], p=[0.25, 0.5, 0.25]))
    out = [[(base, 0.75), (base + 1, 0.25)]]
    for k in range(1, m):
        b = base + k
        out.append([(b, 0.6), (b + 1, 0.3), (b + 2, 0.1)])
    return out


def gen_world(cfg: GenConfig, seed: int | None = None) -> list[World]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    worlds = []
    m = len(cfg.mot_names)
    for s in range(cfg.sku_count):
        n = _sample_node_count(cfg, rng)
        kinds, topo = gen_topology(n, cfg, rng)
        prod = np.array([k is NodeKind.PRODUCTION for k in kinds])
        if not prod.any():
            raise ValueError("world without production")
        lead_hist = [_lead_hist(rng, m) for _ in range(topo.n_edges)]
        # plants are the main source; DC-to-DC lanes carry a minority of requests
        weights = (rng.dirichlet(np.ones(topo.n_edges)) + 0.05) * np.where(prod[topo.src], 1.0, cfg.transfer_weight)
        sourcing = SourcingTables.from_weights(topo, weights, np.zeros(topo.n_edges, dtype=np.int64))
        dos = np.where(prod, 0.0, rng.uniform(*cfg.dos_range, size=n))
        base = np.where(prod, 0.0, cfg.demand_median * np.exp(cfg.demand_sigma * rng.standard_normal(n)))
        share = np.where(prod, rng.dirichlet(np.ones(n)) + 0.1, 0.0)
        share = share / share.sum()
        worlds.append(World(
            sku=f"sku_{s:03d}", kinds=kinds, topo=topo, lead_hist=lead_hist, sourcing=sourcing, dos=dos,
            base=base, phase=float(rng.uniform(0, 52)),
            price=float(cfg.price_median * math.exp(cfg.price_sigma * rng.standard_normal())),
            plant_share=share,
        ))
    return worlds


def wmape_sigma(w: float) -> float:
    """Lognormal log-sd whose mean-one multiplier has ``E|Z - 1| = w``."""
    if w <= 0:
        return 0.0
    return 2.0 * NormalDist().inv_cdf((2.0 + w) / 4.0)


def wmape_profile(cfg: GenConfig) -> np.ndarray:
    return np.linspace(cfg.wmape[0], cfg.wmape[1], cfg.horizon)


def gen_forecasts(truth: np.ndarray, wmape: np.ndarray, rng: np.random.Generator, horizon: int | None = None) -> np.ndarray:
    """``truth (T_all, N)`` -> forecasts ``(T, N, H)`` with ``forecast[t, :, h] ~ truth[t + h]``.

    Noise is a mean-one lognormal multiplier per (issue week, node, step)
    whose spread matches the WMAPE target for that step.
    """
    wmape = np.asarray(wmape, dtype=np.float64)
    h = wmape.size if horizon is None else horizon
    if np.any(np.diff(wmape) < 0):
        raise ValueError("wmape profile must be nondecreasing")
    t_all, n = truth.shape
    t = t_all - h + 1
    sig = np.array([wmape_sigma(w) for w in wmape])
    idx = np.arange(t)[:, None] + np.arange(h)[None, :]
    target = truth[idx].transpose(0, 2, 1)  # (T, N, H)
    eps = rng.standard_normal((t, n, h))
    return target * np.exp(sig * eps - 0.5 * sig ** 2)


def measured_wmape(forecast: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per step ``h``: median over nodes of ``sum|F - T| / sum T`` across issue weeks."""
    t, n, h = forecast.shape
    out = np.empty(h)
    for j in range(h):
        tr = truth[j:j + t]
        err = np.abs(forecast[:, :, j] - tr).sum(axis=0)
        tot = tr.sum(axis=0)
        ok = tot > 0
        out[j] = float(np.median(err[ok] / tot[ok])) if ok.any() else 0.0
    return out


def _seasonal(world: World, weeks: np.ndarray, amp: float) -> np.ndarray:
    return 1.0 + amp * np.sin(2.0 * np.pi * (weeks + world.phase) / 52.0)


def _sample_lead(hist, rng) -> int:
    leads = [l for l, _ in hist]
    probs = np.array([p for _, p in hist])
    return int(leads[int(rng.choice(len(leads), p=probs / probs.sum()))]) if len(leads) > 1 else int(leads[0])


def gen_history(world: World, cfg: GenConfig, rng: np.random.Generator,
                noise: BehaviorNoise | None = None) -> SkuData:
    """Roll the world forward under the noisy rule policy and log everything.

    Week order: decide shipments from the start-of-week state, receive
    arrivals (zero-lead shipments land the same week) and production, serve
    demand with lost sales, then ship.
    """
    noise = cfg.noise if noise is None else noise
    topo = world.topo
    n, ne, m, h = topo.n_nodes, topo.n_edges, topo.mot_count, cfg.horizon
    prod = np.array([k is NodeKind.PRODUCTION for k in world.kinds])
    burn = cfg.burn_in
    total = burn + cfg.weeks
    t_all = total + h  # forecasts at the last week look h - 1 weeks ahead
    weeks = np.arange(t_all) - burn
    season = _seasonal(world, weeks, cfg.season_amp)
    expected = world.base[None, :] * season[:, None]
    demand = expected * np.exp(cfg.demand_noise * rng.standard_normal((t_all, n)) - 0.5 * cfg.demand_noise ** 2)
    demand[:, prod] = 0.0
    forecast = gen_forecasts(demand, wmape_profile(cfg), rng, h)  # (total + 1, N, H)
    net_expected = expected.sum(axis=1)
    plant_target = world.plant_share * net_expected.mean() * cfg.plant_cover_weeks

    inventory = np.zeros((total + 1, n))
    production = np.zeros((total, n))
    for v in range(n):
        if prod[v]:
            inventory[0, v] = plant_target[v]
        else:
            inventory[0, v] = world.base[v] * (world.dos[v] + 1.0)
    records: list[list] = []
    arrivals = np.zeros((total + h + 8, n))
    for t in range(total):
        inv = inventory[t]
        cap = np.zeros(n)
        for v in range(n):
            cap[v] = max(inv[v], 0.0) if prod[v] else max(inv[v] - demand[t, v], 0.0)
        a = behavioral_step(inv, cap, forecast[t], world.dos, topo, world.sourcing, rng, noise, prod)
        out = np.zeros(n)
        for e in range(ne):
            u, w = int(topo.src[e]), int(topo.dst[e])
            for k in range(m):
                q = float(a[e, k])
                if q <= 0.0:
                    continue
                lead = _sample_lead(world.lead_hist[e][k], rng)
                records.append([t - burn, u, w, k, q, lead])
                arrivals[t + lead, w] += q
                out[u] += q
        for v in range(n):
            if prod[v]:
                target = world.plant_share[v] * net_expected[t]
                u_v = target + cfg.production_gain * (plant_target[v] - inv[v])
                production[t, v] = max(u_v, 0.0) * math.exp(cfg.production_noise * rng.standard_normal())
        for v in range(n):
            pre = inv[v] + arrivals[t, v] + production[t, v] - demand[t, v]
            inventory[t + 1, v] = max(pre, 0.0) - out[v]

    keep = [r for r in records if r[0] + r[5] >= 0]
    w = cfg.weeks
    s_tr, s_va = cfg.train_weeks, cfg.train_weeks + cfg.val_weeks
    return SkuData(
        sku=world.sku,
        price=world.price,
        mot_names=list(cfg.mot_names),
        node_ids=[("P" if prod[v] else "D") + str(v) for v in range(n)],
        kinds=list(world.kinds),
        dos=world.dos.copy(),
        splits={"train": (0, s_tr), "val": (s_tr, s_va), "test": (s_va, s_va + cfg.test_weeks)},
        topologies=[(0, topo)],
        lead_hist=world.lead_hist,
        inventory=inventory[burn:burn + w + 1].copy(),
        demand=demand[burn:burn + w].copy(),
        production=production[burn:burn + w].copy(),
        forecast=forecast[burn:burn + w].copy(),
        shipments=ShipmentLog.from_records([tuple(r) for r in keep if r[0] < w], n),
    )


def generate_corpus(cfg: GenConfig) -> list[SkuData]:
    worlds = gen_world(cfg)
    out = []
    for i, wld in enumerate(worlds):
        rng = np.random.default_rng([cfg.seed, 1, i])
        out.append(gen_history(wld, cfg, rng))
    return out
