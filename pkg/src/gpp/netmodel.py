"""Supply-network data model: topologies, imbalance profiles, actions, shipments.

Node ids are dense integers ``0..n-1`` within one SKU snapshot.  Quantities
are float64 in SKU-scaled inventory units unless a function says otherwise.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NodeKind(str, enum.Enum):
    DISTRIBUTION = "DISTRIBUTION"
    PRODUCTION = "PRODUCTION"


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """SKU-specific directed graph with typed nodes and ``mot_count`` modes per edge."""

    kinds: tuple[NodeKind, ...]
    src: np.ndarray
    dst: np.ndarray
    mot_count: int = 1

    def __post_init__(self):
        kinds = tuple(NodeKind(k) for k in self.kinds)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "src", _frozen(self.src, np.int64))
        object.__setattr__(self, "dst", _frozen(self.dst, np.int64))
        n = len(kinds)
        if n < 1:
            raise ValueError("topology needs at least one node")
        if self.mot_count < 1:
            raise ValueError("mot_count must be >= 1")
        if self.src.shape != self.dst.shape:
            raise ValueError("src/dst length mismatch")
        if self.src.size:
            if self.src.min() < 0 or self.dst.min() < 0 or self.src.max() >= n or self.dst.max() >= n:
                raise ValueError("edge endpoint is not a declared node")
            if np.any(self.src == self.dst):
                raise ValueError("self-loops are not allowed")
            keys = self.src * n + self.dst
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (source, destination) edge")

    @classmethod
    def from_edges(cls, kinds: Sequence, edges: Sequence[tuple[int, int]], mot_count: int = 1) -> "NetworkTopology":
        edges = list(edges)
        src = [e[0] for e in edges]
        dst = [e[1] for e in edges]
        return cls(tuple(kinds), np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), mot_count)

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def is_production(self) -> np.ndarray:
        return np.array([k is NodeKind.PRODUCTION for k in self.kinds], dtype=bool)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}

    def in_neighbors(self, v: int) -> list[int]:
        return self.src[self.dst == v].tolist()

    def out_neighbors(self, v: int) -> list[int]:
        return self.dst[self.src == v].tolist()

    def reverse(self) -> "NetworkTopology":
        return reverse_topology(self)[0]

    def permute(self, perm: Sequence[int]) -> "NetworkTopology":
        """Relabel node ``v`` as ``perm[v]``; edge order is kept."""
        perm = np.asarray(perm, dtype=np.int64)
        kinds = [None] * self.n_nodes
        for old, new in enumerate(perm.tolist()):
            kinds[new] = self.kinds[old]
        return NetworkTopology(tuple(kinds), perm[self.src], perm[self.dst], self.mot_count)

    def same_as(self, other: "NetworkTopology") -> bool:
        return (
            self.kinds == other.kinds
            and self.mot_count == other.mot_count
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )


def reverse_topology(topo: NetworkTopology) -> tuple[NetworkTopology, np.ndarray]:
    """Reverse every edge.

    Edge ``i`` of the result is the reversal of edge ``i`` of ``topo``, so the
    returned index map (reverse edge -> forward edge) is the identity and
    mirroring actions is a pure permutation.
    """
    rev = NetworkTopology(topo.kinds, topo.dst.copy(), topo.src.copy(), topo.mot_count)
    return rev, np.arange(topo.n_edges, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class NodeStateMatrix:
    """Per-node predicted-imbalance profiles, shape ``(n_nodes, K)``."""

    profiles: np.ndarray

    def __post_init__(self):
        p = np.array(self.profiles, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] < 1:
            raise ValueError("profiles must be (n_nodes, K) with K >= 1")
        p.setflags(write=False)
        object.__setattr__(self, "profiles", p)

    @property
    def k(self) -> int:
        return self.profiles.shape[1]

    @property
    def initial_inventory(self) -> np.ndarray:
        return self.profiles[:, 0]


@dataclass(frozen=True, eq=False)
class ActionTensor:
    """Nonnegative supply quantities, shape ``(M, n_edges, n_lambda)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("action tensor must be M x |E| x |Lambda|")
        if np.any(v < 0):
            raise ValueError("actions must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_edge_major(cls, a: np.ndarray) -> "ActionTensor":
        """Build from an ``(E, Lambda, M)`` array (the layout the networks use)."""
        return cls(np.transpose(np.asarray(a), (2, 0, 1)))

    def edge_major(self) -> np.ndarray:
        return np.ascontiguousarray(np.transpose(self.values, (1, 2, 0)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def mirror(self, edge_map: np.ndarray | None = None) -> "ActionTensor":
        """Edge features for the reverse graph: ``b[w, v] = a[v, w]``."""
        if edge_map is None:
            edge_map = np.arange(self.values.shape[1])
        return ActionTensor(self.values[:, edge_map, :])


@dataclass(frozen=True, eq=False)
class ShipmentLog:
    """Shipment records; each delivers once at ``send + lead``."""

    send: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    mot: np.ndarray
    qty: np.ndarray
    lead: np.ndarray
    n_nodes: int

    def __post_init__(self):
        for name, dt in (("send", np.int64), ("src", np.int64), ("dst", np.int64),
                         ("mot", np.int64), ("qty", np.float64), ("lead", np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dt))
        n = self.send.size
        if any(getattr(self, k).size != n for k in ("src", "dst", "mot", "qty", "lead")):
            raise ValueError("shipment columns differ in length")
        if n and (self.lead.min() < 0 or self.qty.min() < 0):
            raise ValueError("lead times and quantities must be >= 0")

    @classmethod
    def empty(cls, n_nodes: int) -> "ShipmentLog":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, n_nodes)

    @classmethod
    def from_records(cls, records: Sequence[tuple], n_nodes: int) -> "ShipmentLog":
        if not records:
            return cls.empty(n_nodes)
        cols = list(zip(*records))
        return cls(*[np.array(c) for c in cols], n_nodes=n_nodes)

    def __len__(self) -> int:
        return int(self.send.size)

    @property
    def arrival(self) -> np.ndarray:
        return self.send + self.lead

    def scaled(self, factor: float) -> "ShipmentLog":
        return ShipmentLog(self.send, self.src, self.dst, self.mot, self.qty * factor, self.lead, self.n_nodes)


def incoming_supply(log: ShipmentLog, node: int, receive_time: int, as_of: int,
                    include_as_of: bool = False) -> float:
    """Quantity arriving at ``node`` in ``receive_time`` from shipments already sent.

    Shipments count when ``send < as_of`` (or ``send <= as_of`` with
    ``include_as_of``, which admits same-interval zero-lead shipments).
    """
    if not 0 <= node < log.n_nodes:
        raise KeyError(f"unknown node id {node}")
    if as_of > receive_time + 1:
        raise ValueError("as_of must be <= receive_time + 1")
    sent = log.send <= as_of if include_as_of else log.send < as_of
    mask = (log.dst == node) & sent & (log.arrival == receive_time)
    return float(log.qty[mask].sum())


def imbalance_profile(initial_inventory: float, incoming: Sequence[float], demand: Sequence[float]) -> np.ndarray:
    """Forward imbalance recursion ``f[k] = f[k-1] + incoming[k-1] - demand[k-1]``.

    Values are not clipped; negative entries are predicted stockouts.
    """
    incoming = np.asarray(incoming, dtype=np.float64).reshape(-1)
    demand = np.asarray(demand, dtype=np.float64).reshape(-1)
    if incoming.shape != demand.shape:
        raise ValueError("incoming and demand must both have length K-1")
    return imbalance_profiles(np.float64(initial_inventory), incoming, demand)


def imbalance_profiles(inventory: np.ndarray, incoming: np.ndarray, demand: np.ndarray) -> np.ndarray:
    """Vectorised ``imbalance_profile`` over leading axes.

    ``inventory`` has shape ``(..., N)``; ``incoming``/``demand`` ``(..., N, K-1)``.
    """
    inventory = np.asarray(inventory, dtype=np.float64)
    step = np.asarray(incoming, dtype=np.float64) - np.asarray(demand, dtype=np.float64)
    k = step.shape[-1] + 1
    lead = np.broadcast_shapes(inventory.shape, step.shape[:-1])
    out = np.empty(lead + (k,))
    out[..., 0] = inventory
    # sequential accumulation keeps the bits identical to the scalar recursion
    for i in range(1, k):
        out[..., i] = out[..., i - 1] + step[..., i - 1]
    return out


@dataclass(frozen=True)
class SkuScaler:
    max_inventory: float

    def __post_init__(self):
        if not self.max_inventory > 0:
            raise ValueError("max_inventory must be positive")

    def scale(self, y):
        return np.asarray(y, dtype=np.float64) / self.max_inventory

    def unscale(self, y):
        return np.asarray(y, dtype=np.float64) * self.max_inventory


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of independent graphs, used to batch network passes.

    Graphs never exchange messages; each keeps its own node and edge block.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    n_graphs: int
    node_offsets: np.ndarray = field(repr=False)
    edge_offsets: np.ndarray = field(repr=False)
    _reverse: "GraphBatch | None" = field(default=None, repr=False)

    @classmethod
    def from_topologies(cls, topos: Sequence[NetworkTopology]) -> "GraphBatch":
        n_nodes = np.array([t.n_nodes for t in topos], dtype=np.int64)
        n_edges = np.array([t.n_edges for t in topos], dtype=np.int64)
        node_off = np.concatenate([[0], np.cumsum(n_nodes)])
        edge_off = np.concatenate([[0], np.cumsum(n_edges)])
        src = np.concatenate([t.src + node_off[i] for i, t in enumerate(topos)]) if topos else np.zeros(0, np.int64)
        dst = np.concatenate([t.dst + node_off[i] for i, t in enumerate(topos)]) if topos else np.zeros(0, np.int64)
        g = len(topos)
        return cls(
            n_nodes=int(node_off[-1]),
            src=src.astype(np.int64),
            dst=dst.astype(np.int64),
            node_graph=np.repeat(np.arange(g), n_nodes),
            edge_graph=np.repeat(np.arange(g), n_edges),
            n_graphs=g,
            node_offsets=node_off,
            edge_offsets=edge_off,
        )

    @classmethod
    def tile(cls, topo: NetworkTopology, copies: int) -> "GraphBatch":
        n, e = topo.n_nodes, topo.n_edges
        node_off = np.arange(copies + 1, dtype=np.int64) * n
        edge_off = np.arange(copies + 1, dtype=np.int64) * e
        src = (topo.src[None, :] + node_off[:-1, None]).reshape(-1)
        dst = (topo.dst[None, :] + node_off[:-1, None]).reshape(-1)
        return cls(
            n_nodes=n * copies, src=src, dst=dst,
            node_graph=np.repeat(np.arange(copies), n),
            edge_graph=np.repeat(np.arange(copies), e),
            n_graphs=copies, node_offsets=node_off, edge_offsets=edge_off,
        )

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def nodes_per_graph(self) -> np.ndarray:
        return np.diff(self.node_offsets)

    def reverse(self) -> "GraphBatch":
        if self._reverse is None:
            self._reverse = GraphBatch(
                self.n_nodes, self.dst, self.src, self.node_graph, self.edge_graph,
                self.n_graphs, self.node_offsets, self.edge_offsets,
            )
            self._reverse._reverse = self
        return self._reverse
