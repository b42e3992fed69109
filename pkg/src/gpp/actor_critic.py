"""Policy and value heads, node/network rewards, and the behavioral regularizer.

Action tensors inside the networks are edge-major ``(E, Lambda, M)``; the
``ActionTensor`` value type in :mod:`gpp.netmodel` uses ``(M, E, Lambda)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .gat import GatSpec, as_graph, embed_x, embed_xa, init_embedding
from .netmodel import GraphBatch, NetworkTopology


# --------------------------------------------------------------------------
# risk preferences and rewards
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RiskPreference:
    c1: float
    c2: float
    f_ref: float

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("cost slopes c1, c2 must be positive")
        if not self.f_ref >= 0:
            raise ValueError("f_ref must be nonnegative")


def default_risk_grid() -> list[RiskPreference]:
    """Twelve preferences: (c1, c2) in {(10, 10), (2, 10)} x f_ref in 0.0..0.5."""
    grid = []
    for c1, c2 in ((10.0, 10.0), (2.0, 10.0)):
        for f_ref in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
            grid.append(RiskPreference(c1, c2, f_ref))
    return grid


def risk_arrays(risks: Sequence[RiskPreference]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.array([r.c1 for r in risks], dtype=np.float64),
            np.array([r.c2 for r in risks], dtype=np.float64),
            np.array([r.f_ref for r in risks], dtype=np.float64))


def node_reward(f, risk: RiskPreference):
    """Piecewise-linear reward peaking at 1 for ``f == f_ref`` with floor -1."""
    f = np.asarray(f, dtype=np.float64)
    over = 1.0 - risk.c1 * (f - risk.f_ref)
    under = 1.0 - risk.c2 * (risk.f_ref - f)
    out = np.maximum(np.where(f >= risk.f_ref, over, under), -1.0)
    return float(out) if out.ndim == 0 else out


def node_reward_grid(f: np.ndarray, risks: Sequence[RiskPreference]) -> np.ndarray:
    """``f (...)`` -> rewards ``(..., Lambda)``."""
    c1, c2, fr = risk_arrays(risks)
    f = np.asarray(f, dtype=np.float64)[..., None]
    out = np.where(f >= fr, 1.0 - c1 * (f - fr), 1.0 - c2 * (fr - f))
    return np.maximum(out, -1.0)


def network_reward(x_next: np.ndarray, risk) -> float | np.ndarray:
    """Sum over nodes of the reward of each node's last profile entry.

    ``risk`` is one preference (scalar result) or a sequence (``(Lambda,)``).
    """
    last = np.asarray(x_next, dtype=np.float64)[:, -1]
    if isinstance(risk, RiskPreference):
        return float(np.sum(node_reward(last, risk)))
    return node_reward_grid(last, risk).sum(axis=0)


def batch_rewards(x_next: np.ndarray, graph: GraphBatch, risks: Sequence[RiskPreference]) -> np.ndarray:
    """Per-graph network rewards ``(G, Lambda)`` for stacked ``x_next (N, K)``."""
    per_node = node_reward_grid(np.asarray(x_next)[:, -1], risks)
    return dc._kernels.segment_sum(per_node, graph.node_graph, graph.n_graphs)


def behavioral_regularizer(x: np.ndarray, a: np.ndarray, topo: NetworkTopology, risk: RiskPreference) -> float:
    """``-(1/|V|) sum_v (min(f_v,K-1 - f_ref, 0) + incoming_v)^2`` for one preference.

    ``a`` is the ``(E, M)`` action slice for that preference.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(topo.n_edges, topo.mot_count)
    incoming = np.zeros(topo.n_nodes)
    np.add.at(incoming, topo.dst, a.sum(axis=1))
    gap = np.minimum(x[:, -1] - risk.f_ref, 0.0) + incoming
    return float(-np.mean(gap * gap))


def regularizer_tensor(x: np.ndarray, a: Tensor, graph: GraphBatch, f_ref: np.ndarray) -> Tensor:
    """Differentiable regularizer per graph and preference, ``(G, Lambda)``."""
    shortfall = np.minimum(np.asarray(x)[:, -1, None] - f_ref[None, :], 0.0)
    incoming = dc.segment_sum(dc.tsum(a, axis=-1), graph.dst, graph.n_nodes)
    per_node = dc.square(incoming + shortfall)
    per_graph = dc.segment_sum(per_node, graph.node_graph, graph.n_graphs)
    return per_graph * (-1.0 / graph.nodes_per_graph()[:, None].astype(np.float64))


def supply_capability(inventory: np.ndarray, demand: np.ndarray, is_production: np.ndarray) -> np.ndarray:
    """``max(inventory - demand, 0)``; production nodes face no demand."""
    inventory = np.asarray(inventory, dtype=np.float64)
    d = np.where(is_production, 0.0, demand)
    return np.maximum(inventory - d, 0.0)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    k: int = 4
    mot_count: int = 2
    n_lambda: int = 12
    gamma: float = 0.95
    heads: int = 3
    gat_x_dims: tuple[int, ...] = (16, 16, 16)
    gat_xa_dims: tuple[int, ...] = (100, 20, 20)
    mu_hidden: tuple[int, ...] = (32, 8)
    q_hidden: tuple[int, ...] = (128, 32, 8)
    # initial logit of every edge fraction; sigmoid(-3) ~ 0.05 keeps most nodes'
    # totals below 1, where the capacity normalization still lets the total move
    mu_out_bias: float = -3.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("k", "mot_count", "n_lambda", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def x_spec(self) -> GatSpec:
        return GatSpec(self.k, tuple(self.gat_x_dims), self.heads)

    @property
    def xa_spec(self) -> GatSpec:
        return GatSpec(self.k, tuple(self.gat_xa_dims), self.heads, edge_dim=self.mot_count)

    @property
    def value_bound(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int], rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        store.add(f"{prefix}.{i}.W", dc.glorot(rng, dims[i], dims[i + 1]))
        store.add(f"{prefix}.{i}.b", np.zeros(dims[i + 1]))


def mlp(store: ParamStore, prefix: str, h, n_layers: int) -> Tensor:
    """LeakyReLU hidden layers, linear output."""
    for i in range(n_layers):
        h = dc.matmul(h, store[f"{prefix}.{i}.W"]) + store[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            h = dc.leaky_relu(h)
    return h


@dataclass
class GPPModel:
    """Actor (``actor``) and critic (``critic``) parameter groups for one config."""

    config: NetConfig
    actor: ParamStore = field(default_factory=ParamStore)
    critic: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "GPPModel":
        rng = np.random.default_rng(seed)
        m = cls(config)
        h2 = 2 * config.gat_x_dims[-1]
        init_embedding(m.actor, config.x_spec, rng, "gx")
        init_mlp(m.actor, "mu", (2 * h2,) + tuple(config.mu_hidden) + (config.mot_count * config.n_lambda,), rng)
        m.actor[f"mu.{len(config.mu_hidden)}.b"].data[...] = config.mu_out_bias
        u2 = 2 * config.gat_xa_dims[-1]
        init_embedding(m.critic, config.xa_spec, rng, "gxa")
        init_mlp(m.critic, "q", (u2,) + tuple(config.q_hidden) + (config.n_lambda,), rng)
        return m

    def stores(self) -> dict[str, ParamStore]:
        return {"actor": self.actor, "critic": self.critic}


def _xb(x) -> Tensor:
    x = dc.as_tensor(x)
    return x.reshape(x.shape[0], 1, x.shape[1]) if x.ndim == 2 else x


def policy_raw(actor: ParamStore, cfg: NetConfig, x, graph) -> Tensor:
    """Unnormalized edge fractions ``a_hat`` in ``(0, 1)``, shape ``(E, Lambda, M)``."""
    graph = as_graph(graph)
    s = embed_x(actor, _xb(x), graph, cfg.x_spec)
    s = s.reshape(graph.n_nodes, s.shape[-1])
    pair = dc.concat([dc.take_rows(s, graph.src), dc.take_rows(s, graph.dst)], axis=-1)
    logits = mlp(actor, "mu", pair, len(cfg.mu_hidden) + 1)
    return dc.sigmoid(logits).reshape(graph.n_edges, cfg.n_lambda, cfg.mot_count)


def normalize_actions(a_hat, graph: GraphBatch, capability: np.ndarray) -> Tensor:
    """Scale fractions so each node ships at most its capability.

    ``A_v = sum of a_hat over out-edges and MOTs``; ``a = Y_v / max(A_v, 1) * a_hat``.
    At ``A_v == 1`` the unnormalized branch is taken (values agree there).
    """
    total = dc.segment_sum(dc.tsum(a_hat, axis=-1), graph.src, graph.n_nodes)
    scale = np.asarray(capability, dtype=np.float64)[:, None] / dc.maximum_scalar(total, 1.0)
    return a_hat * dc.take_rows(scale, graph.src).reshape(graph.n_edges, a_hat.shape[1], 1)


def policy_forward(actor: ParamStore, cfg: NetConfig, x, graph, capability: np.ndarray) -> Tensor:
    """Capacity-normalized actions ``(E, Lambda, M)``."""
    graph = as_graph(graph)
    return normalize_actions(policy_raw(actor, cfg, x, graph), graph, capability)


def node_values(critic: ParamStore, cfg: NetConfig, x, a, graph) -> Tensor:
    """Per-node values ``(N, Lambda)`` bounded by ``1/(1-gamma)``."""
    graph = as_graph(graph)
    a = dc.as_tensor(a)
    n_lam = a.shape[1]
    x = _xb(x)
    u = embed_xa(critic, dc.mul(x, np.ones((1, n_lam, 1))), a, graph, cfg.xa_spec)
    out = mlp(critic, "q", u, len(cfg.q_hidden) + 1)  # (N, Lambda, Lambda)
    if n_lam == cfg.n_lambda:
        own = dc.tsum(out * np.eye(n_lam)[None], axis=-1)
    elif n_lam == 1:
        raise ValueError("action slices must cover every preference")
    else:
        raise ValueError(f"expected {cfg.n_lambda} action slices, got {n_lam}")
    return dc.tanh(own) * cfg.value_bound


def value_forward(critic: ParamStore, cfg: NetConfig, x, a, graph) -> Tensor:
    """Network values per graph and preference, ``(G, Lambda)``."""
    graph = as_graph(graph)
    a = dc.as_tensor(a)
    if a.shape[0] != graph.n_edges or a.shape[2] != cfg.mot_count:
        raise ValueError(f"action shape {a.shape} does not fit graph with {graph.n_edges} edges")
    q = node_values(critic, cfg, x, a, graph)
    return dc.segment_sum(q, graph.node_graph, graph.n_graphs)


def td_loss(q: Tensor, y: np.ndarray) -> Tensor:
    """Mean over samples of the preference-averaged squared TD error."""
    return dc.mean(dc.square(q - y))


def actor_objective(actor: ParamStore, critic: ParamStore, cfg: NetConfig, x, graph,
                    capability: np.ndarray, f_ref: np.ndarray, eta: float) -> Tensor:
    """Mean over samples and preferences of ``Q + eta * L`` (to be maximized)."""
    graph = as_graph(graph)
    a = policy_forward(actor, cfg, x, graph, capability)
    q = value_forward(critic, cfg, x, a, graph)
    if eta:
        q = q + regularizer_tensor(np.asarray(dc.as_tensor(x).data), a, graph, f_ref) * eta
    return dc.mean(q)


def act(actor: ParamStore, cfg: NetConfig, x: np.ndarray, graph, capability: np.ndarray) -> np.ndarray:
    """Gradient-free policy evaluation returning a plain array ``(E, Lambda, M)``."""
    with dc.no_grad():
        return policy_forward(actor, cfg, x, graph, capability).data
