"""Comparison policies: the days-of-supply safety-stock rule and its noisy variant.

The rule is objective-blind.  Each distribution node whose inventory falls
below its safety stock asks one parent (sampled by historical supply shares)
for the gap; parents serve requests in random order, limited by their own
post-demand stock, over their dominant mode of transport.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import NetworkTopology, ShipmentLog


def safety_stock(forecast, dos: float) -> float:
    """Forecast demand summed over ``dos`` weeks; the last partial week is prorated."""
    if dos < 0:
        raise ValueError("dos must be nonnegative")
    f = np.asarray(forecast, dtype=np.float64).reshape(-1)
    full = int(math.floor(dos))
    frac = dos - full
    need = full + (1 if frac > 0 else 0)
    if need > f.size:
        raise ValueError(f"forecast covers {f.size} weeks, safety window needs {need}")
    total = float(f[:full].sum())
    if frac > 0:
        total += frac * float(f[full])
    return total


def safety_stock_vec(forecast: np.ndarray, dos: np.ndarray) -> np.ndarray:
    """Vectorised over nodes: ``forecast (..., N, H)``, ``dos (N,)`` -> ``(..., N)``."""
    forecast = np.asarray(forecast, dtype=np.float64)
    h = forecast.shape[-1]
    dos = np.asarray(dos, dtype=np.float64)
    if np.any(dos < 0) or np.any(np.ceil(dos) > h):
        raise ValueError("dos outside the forecast window")
    steps = np.arange(h, dtype=np.float64)
    weight = np.clip(dos[:, None] - steps[None, :], 0.0, 1.0)  # (N, H)
    return (forecast * weight).sum(axis=-1)


@dataclass
class SourcingTables:
    """Per-node parent choices, their sampling shares, and each edge's usual MOT."""

    parents: list[np.ndarray]
    edges: list[np.ndarray]
    shares: list[np.ndarray]
    dominant_mot: np.ndarray

    @classmethod
    def uniform(cls, topo: NetworkTopology) -> "SourcingTables":
        return cls.from_weights(topo, np.ones(topo.n_edges), np.zeros(topo.n_edges, dtype=np.int64))

    @classmethod
    def from_weights(cls, topo: NetworkTopology, weight: np.ndarray, dominant_mot: np.ndarray) -> "SourcingTables":
        parents, edges, shares = [], [], []
        weight = np.asarray(weight, dtype=np.float64)
        for v in range(topo.n_nodes):
            e = np.flatnonzero(topo.dst == v)
            w = weight[e]
            if e.size and w.sum() <= 0:
                w = np.ones(e.size)
            parents.append(topo.src[e].copy())
            edges.append(e)
            shares.append(w / w.sum() if e.size else w)
        return cls(parents, edges, shares, np.asarray(dominant_mot, dtype=np.int64))

    @classmethod
    def from_log(cls, topo: NetworkTopology, log: ShipmentLog, weeks: range | None = None) -> "SourcingTables":
        """Quantity shares per (child, parent) and the most-used MOT per edge."""
        idx = topo.edge_index()
        qty = np.zeros((topo.n_edges, topo.mot_count))
        for i in range(len(log)):
            if weeks is not None and int(log.send[i]) not in weeks:
                continue
            key = (int(log.src[i]), int(log.dst[i]))
            if key in idx:
                qty[idx[key], log.mot[i]] += log.qty[i]
        return cls.from_weights(topo, qty.sum(axis=1), np.argmax(qty, axis=1))


@dataclass
class StepRecord:
    requests: np.ndarray
    unfilled: list[int] = field(default_factory=list)


def rule_based_step(position: np.ndarray, capability: np.ndarray, forecast: np.ndarray, dos: np.ndarray,
                    topo: NetworkTopology, tables: SourcingTables, rng: np.random.Generator,
                    is_production: np.ndarray | None = None, record: StepRecord | None = None) -> np.ndarray:
    """One interval of the safety-stock rule; returns ``(E, M)`` shipments.

    ``position`` is the inventory the rule compares against safety stock
    (callers pass start-of-week on-hand stock).  Requests from nodes
    without parents are dropped and reported in ``record.unfilled``.
    """
    n = topo.n_nodes
    prod = np.zeros(n, dtype=bool) if is_production is None else np.asarray(is_production)
    ss = safety_stock_vec(forecast, dos)
    req = np.where(prod, 0.0, np.maximum(ss - position, 0.0))
    if record is not None:
        record.requests = req.copy()
    asks: dict[int, list[tuple[int, int, float]]] = {}
    for v in range(n):
        if req[v] <= 0:
            continue
        if tables.parents[v].size == 0:
            if record is not None:
                record.unfilled.append(v)
            continue
        j = int(rng.choice(tables.parents[v].size, p=tables.shares[v])) if tables.parents[v].size > 1 else 0
        asks.setdefault(int(tables.parents[v][j]), []).append((v, int(tables.edges[v][j]), float(req[v])))
    out = np.zeros((topo.n_edges, topo.mot_count))
    for p in sorted(asks):
        left = float(capability[p])
        reqs = asks[p]
        order = rng.permutation(len(reqs)) if len(reqs) > 1 else [0]
        for i in order:
            _, e, q = reqs[i]
            give = min(q, left)
            if give > 0:
                out[e, tables.dominant_mot[e]] += give
                left -= give
    return out


@dataclass(frozen=True)
class BehaviorNoise:
    """Perturbations that turn the rule into an imperfect logging policy."""

    jitter: float = 0.3
    drop: float = 0.08
    double: float = 0.08
    mot_flip: float = 0.2

    @property
    def is_zero(self) -> bool:
        return self.jitter == 0 and self.drop == 0 and self.double == 0 and self.mot_flip == 0


def clamp_to_capability(a: np.ndarray, src: np.ndarray, capability: np.ndarray) -> np.ndarray:
    """Scale each node's outgoing shipments down to its capability."""
    out_sum = np.zeros(capability.shape[0])
    np.add.at(out_sum, src, a.sum(axis=-1))
    factor = np.where(out_sum > capability, capability / np.where(out_sum > 0, out_sum, 1.0), 1.0)
    return a * factor[src][:, None]


def behavioral_step(position, capability, forecast, dos, topo: NetworkTopology, tables: SourcingTables,
                    rng: np.random.Generator, noise: BehaviorNoise, is_production=None) -> np.ndarray:
    """Rule step plus multiplicative jitter, dropped/doubled shipments and MOT flips."""
    a = rule_based_step(position, capability, forecast, dos, topo, tables, rng, is_production)
    if noise.is_zero:
        return a
    m = topo.mot_count
    for e, k in zip(*np.nonzero(a)):
        q = a[e, k]
        u = rng.random(4)
        q *= math.exp(noise.jitter * rng.standard_normal() - 0.5 * noise.jitter ** 2) if noise.jitter else 1.0
        if u[0] < noise.drop:
            q = 0.0
        elif u[1] < noise.double:
            q *= 2.0
        a[e, k] = 0.0
        kk = (k + 1 + int(rng.integers(m - 1))) % m if (m > 1 and u[2] < noise.mot_flip) else k
        a[e, kk] += q
    return clamp_to_capability(a, topo.src, np.asarray(capability, dtype=np.float64))
