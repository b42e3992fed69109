"""Per-SKU dataset files, SKU scaling, state features and offline transitions.

File layout (one JSON document per SKU, all quantities in raw units)::

    {
      "format": "gpp-sku", "version": 1,
      "sku": "sku_000", "price": 3.2, "mot_names": ["truckload", "intermodal"],
      "nodes": [{"id": "P0", "kind": "PRODUCTION", "dos": 0.0}, ...],
      "weeks": W, "horizon": 13,
      "splits": {"train": [0, 60], "val": [60, 73], "test": [73, 86]},
      "topologies": [{"from_week": 0, "edges": [[src, dst], ...]}],
      "lead_time_hist": [[[[lead, prob], ...] per MOT] per edge of the first topology],
      "records": {
        "inventory": W+1 rows of N on-hand values at the start of each week,
        "demand": W x N actual customer demand (0 at plants),
        "production": W x N units produced (0 at DCs),
        "forecast": W x N x horizon demand forecasts, entry h is for week t+h
      },
      "shipments": [[send_week, src, dst, mot, qty, lead_weeks], ...]
    }

Week ``t`` dynamics: arrivals ``S`` (including zero-lead shipments sent in
``t``) and production ``U`` are received, demand ``D`` is served with lost
sales, then outgoing shipments ``A`` leave::

    pre = I + S + U - D;  OOS = min(pre, 0);  I_next = max(pre, 0) - A
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .netmodel import NetworkTopology, NodeKind, ShipmentLog, SkuScaler, imbalance_profiles

FORMAT = "gpp-sku"
VERSION = 1


@dataclass(eq=False)
class SkuData:
    sku: str
    price: float
    mot_names: list[str]
    node_ids: list[str]
    kinds: list[NodeKind]
    dos: np.ndarray
    splits: dict[str, tuple[int, int]]
    topologies: list[tuple[int, NetworkTopology]]
    lead_hist: list[list[list[tuple[int, float]]]]
    inventory: np.ndarray
    demand: np.ndarray
    production: np.ndarray
    forecast: np.ndarray
    shipments: ShipmentLog
    scale: float = 1.0  # raw quantity = stored quantity * scale

    # ------------------------------------------------------------------ shape
    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def weeks(self) -> int:
        return int(self.demand.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.forecast.shape[2])

    @property
    def mot_count(self) -> int:
        return len(self.mot_names)

    @property
    def is_production(self) -> np.ndarray:
        return np.array([k is NodeKind.PRODUCTION for k in self.kinds])

    @property
    def topology(self) -> NetworkTopology:
        return self.topologies[0][1]

    def topology_at(self, week: int) -> NetworkTopology:
        cur = self.topologies[0][1]
        for start, topo in self.topologies:
            if start <= week:
                cur = topo
        return cur

    def split(self, name: str) -> range:
        lo, hi = self.splits[name]
        return range(lo, hi)

    # ---------------------------------------------------------------- scaling
    def max_train_inventory(self) -> float:
        lo, hi = self.splits["train"]
        return float(self.inventory[lo:hi].max() * self.scale)

    def scaler(self) -> SkuScaler:
        return SkuScaler(self.max_train_inventory())

    def rescaled(self, scaler: SkuScaler | None) -> "SkuData":
        """Return a copy in units of ``scaler`` (``None`` restores raw units)."""
        target = 1.0 if scaler is None else scaler.max_inventory
        f = self.scale / target
        return replace(
            self,
            inventory=self.inventory * f,
            demand=self.demand * f,
            production=self.production * f,
            forecast=self.forecast * f,
            shipments=self.shipments.scaled(f),
            scale=target,
        )

    # --------------------------------------------------------------- features
    def edge_of(self, topo: NetworkTopology | None = None) -> dict[tuple[int, int], int]:
        return (topo or self.topology).edge_index()

    def logged_actions(self, week: int, topo: NetworkTopology | None = None) -> np.ndarray:
        """Logged shipments sent in ``week`` as an ``(E, M)`` array."""
        topo = topo or self.topology_at(week)
        idx = topo.edge_index()
        out = np.zeros((topo.n_edges, self.mot_count))
        log = self.shipments
        for i in np.flatnonzero(log.send == week):
            out[idx[(int(log.src[i]), int(log.dst[i]))], log.mot[i]] += log.qty[i]
        return out

    def inflight_arrivals(self, week: int, k: int) -> np.ndarray:
        """``(N, k-1)``: logged quantity sent before ``week`` arriving in ``week + j``."""
        log = self.shipments
        arr = log.arrival
        out = np.zeros((self.n_nodes, max(k - 1, 0)))
        m = (log.send < week) & (arr >= week) & (arr < week + k - 1)
        np.add.at(out, (log.dst[m], arr[m] - week), log.qty[m])
        return out

    def predicted_demand(self, week: int, k: int) -> np.ndarray:
        """``(N, k-1)`` forecast made at ``week`` for weeks ``week .. week+k-2``; zero at plants."""
        f = self.forecast[week, :, : k - 1]
        return np.where(self.is_production[:, None], 0.0, f)

    def planned_production(self, week: int, k: int) -> np.ndarray:
        out = np.zeros((self.n_nodes, max(k - 1, 0)))
        hi = min(week + k - 1, self.weeks)
        out[:, : hi - week] = self.production[week:hi].T
        return out

    def state(self, week: int, k: int) -> np.ndarray:
        """Imbalance profiles ``x^week`` of shape ``(N, k)`` from the logged world."""
        incoming = self.inflight_arrivals(week, k) + self.planned_production(week, k)
        return imbalance_profiles(self.inventory[week], incoming, self.predicted_demand(week, k))

    def capability(self, week: int, actual: bool = False) -> np.ndarray:
        d = self.demand[week] if actual else self.forecast[week, :, 0]
        d = np.where(self.is_production, 0.0, d)
        return np.maximum(self.inventory[week] - d, 0.0)

    # -------------------------------------------------------------- outcomes
    def logged_outcomes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-week ``(OOS, ES)`` arrays ``(W, N)`` implied by the logged records."""
        w = self.weeks
        arrivals = np.zeros((w, self.n_nodes))
        log = self.shipments
        m = log.arrival < w
        np.add.at(arrivals, (log.arrival[m], log.dst[m]), log.qty[m])
        pre = self.inventory[:w] + arrivals + self.production - self.demand
        return np.minimum(pre, 0.0), np.maximum(self.inventory[1:w + 1], 0.0)

    # ------------------------------------------------------------------- I/O
    def to_json(self) -> dict:
        if self.scale != 1.0:
            return self.rescaled(None).to_json()
        topo0 = self.topology
        log = self.shipments
        return {
            "format": FORMAT,
            "version": VERSION,
            "sku": self.sku,
            "price": float(self.price),
            "mot_names": list(self.mot_names),
            "nodes": [{"id": nid, "kind": k.value, "dos": float(d)}
                      for nid, k, d in zip(self.node_ids, self.kinds, self.dos)],
            "weeks": self.weeks,
            "horizon": self.horizon,
            "splits": {k: [int(v[0]), int(v[1])] for k, v in self.splits.items()},
            "topologies": [{"from_week": int(w), "edges": [[int(a), int(b)] for a, b in t.edges]}
                           for w, t in self.topologies],
            "lead_time_hist": [[[[int(l), float(p)] for l, p in per_mot] for per_mot in per_edge]
                               for per_edge in self.lead_hist],
            "records": {
                "inventory": self.inventory.tolist(),
                "demand": self.demand.tolist(),
                "production": self.production.tolist(),
                "forecast": self.forecast.tolist(),
            },
            "shipments": [[int(log.send[i]), int(log.src[i]), int(log.dst[i]), int(log.mot[i]),
                           float(log.qty[i]), int(log.lead[i])] for i in range(len(log))],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SkuData":
        if doc.get("format") != FORMAT:
            raise ValueError("not a gpp SKU document")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported dataset version {doc.get('version')}")
        kinds = [NodeKind(n["kind"]) for n in doc["nodes"]]
        m = len(doc["mot_names"])
        topos = [(int(t["from_week"]), NetworkTopology.from_edges(kinds, [tuple(e) for e in t["edges"]], m))
                 for t in doc["topologies"]]
        rec = doc["records"]
        n = len(kinds)
        return cls(
            sku=doc["sku"],
            price=float(doc["price"]),
            mot_names=list(doc["mot_names"]),
            node_ids=[nd["id"] for nd in doc["nodes"]],
            kinds=kinds,
            dos=np.array([nd["dos"] for nd in doc["nodes"]], dtype=np.float64),
            splits={k: (int(v[0]), int(v[1])) for k, v in doc["splits"].items()},
            topologies=topos,
            lead_hist=[[[(int(l), float(p)) for l, p in per_mot] for per_mot in per_edge]
                       for per_edge in doc["lead_time_hist"]],
            inventory=np.array(rec["inventory"], dtype=np.float64).reshape(-1, n),
            demand=np.array(rec["demand"], dtype=np.float64).reshape(-1, n),
            production=np.array(rec["production"], dtype=np.float64).reshape(-1, n),
            forecast=np.array(rec["forecast"], dtype=np.float64).reshape(len(rec["demand"]), n, -1),
            shipments=ShipmentLog.from_records([tuple(r) for r in doc["shipments"]], n),
        )


def write_sku(path, sku: SkuData) -> None:
    """Deterministic serialization (sorted keys, full float repr)."""
    text = json.dumps(sku.to_json(), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n")


def read_sku(path) -> SkuData:
    return SkuData.from_json(json.loads(Path(path).read_text()))


def read_corpus(directory) -> list[SkuData]:
    d = Path(directory)
    files = sorted(p for p in d.glob("*.json") if p.name != "manifest.json")
    if not files:
        raise FileNotFoundError(f"no SKU files in {d}")
    return [read_sku(p) for p in files]


def scale_dataset(raw: Sequence[SkuData], scalers: dict[str, SkuScaler]) -> list[SkuData]:
    """Divide every quantity by the SKU's max training-period inventory."""
    out = []
    for s in raw:
        if s.sku not in scalers:
            raise KeyError(f"missing scaler for {s.sku}")
        sc = scalers[s.sku]
        if not sc.max_inventory > 0:
            raise ValueError(f"nonpositive max_inventory for {s.sku}")
        out.append(s.rescaled(sc))
    return out


def scale_corpus(raw: Sequence[SkuData]) -> list[SkuData]:
    return scale_dataset(raw, {s.sku: s.scaler() for s in raw})


# --------------------------------------------------------------------------
# transitions
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Transition:
    """One logged step ``(x, a, x', a')`` with capabilities and topologies."""

    x: np.ndarray
    a: np.ndarray
    x2: np.ndarray
    a2: np.ndarray
    cap: np.ndarray
    cap2: np.ndarray
    topo: NetworkTopology
    topo2: NetworkTopology
    sku: str = ""
    week: int = 0


def build_transitions(skus: Iterable[SkuData], split: str, k: int) -> list[Transition]:
    """Transitions for weeks ``t`` with ``t`` and ``t+1`` inside ``split``."""
    out = []
    for s in skus:
        lo, hi = s.splits[split]
        for t in range(lo, hi - 1):
            topo, topo2 = s.topology_at(t), s.topology_at(t + 1)
            out.append(Transition(
                x=s.state(t, k), a=s.logged_actions(t, topo),
                x2=s.state(t + 1, k), a2=s.logged_actions(t + 1, topo2),
                cap=s.capability(t), cap2=s.capability(t + 1),
                topo=topo, topo2=topo2, sku=s.sku, week=t,
            ))
    return out


def corpus_files(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json") if p.name != "manifest.json")


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
