"""GATv2-style attention over directed supply graphs, plus bidirectional embeddings.

Layout convention: node tensors are ``(N, B, F)`` and edge tensors
``(E, B, F)``, where ``B`` is an independent batch axis (the risk-preference
slices for the action-aware variant, 1 otherwise).  Messages flow along edge
direction ``src -> dst``; every node also attends to itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .netmodel import GraphBatch, NetworkTopology

# fused attention primitive (numba or numpy backend) versus the composed-op graph
FUSED = True


@dataclass(frozen=True)
class GatSpec:
    in_dim: int
    dims: tuple[int, ...] = (16, 16, 16)
    heads: int = 3
    edge_dim: int | None = None

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def layer_in(self, layer: int) -> int:
        return self.in_dim if layer == 0 else self.dims[layer - 1] * self.heads


@dataclass
class LayerWeights:
    W0: Tensor
    W1: Tensor
    c: Tensor
    heads: int
    W2: Tensor | None = None

    def __post_init__(self):
        width = self.W0.shape[1]
        if width % self.heads:
            raise ValueError("output width must be divisible by the head count")
        if self.W1.shape != self.W0.shape:
            raise ValueError("W0 and W1 must share a shape")
        if self.c.shape != (self.heads, width // self.heads):
            raise ValueError("attention vector shape must be (heads, head_dim)")


def as_graph(g) -> GraphBatch:
    if isinstance(g, GraphBatch):
        return g
    if isinstance(g, NetworkTopology):
        return GraphBatch.from_topologies([g])
    raise TypeError(f"expected GraphBatch or NetworkTopology, got {type(g).__name__}")


def init_gat(store: ParamStore, prefix: str, spec: GatSpec, rng: np.random.Generator) -> None:
    for layer, d in enumerate(spec.dims):
        fin = spec.layer_in(layer)
        width = d * spec.heads
        store.add(f"{prefix}.{layer}.W0", dc.glorot(rng, fin, width))
        store.add(f"{prefix}.{layer}.W1", dc.glorot(rng, fin, width))
        if spec.edge_dim is not None:
            store.add(f"{prefix}.{layer}.W2", dc.glorot(rng, spec.edge_dim, width))
        store.add(f"{prefix}.{layer}.c", dc.glorot(rng, d, 1, shape=(spec.heads, d)))


def layer_weights(store: ParamStore, prefix: str, layer: int, heads: int) -> LayerWeights:
    key = f"{prefix}.{layer}"
    w2 = store[f"{key}.W2"] if f"{key}.W2" in store else None
    return LayerWeights(store[f"{key}.W0"], store[f"{key}.W1"], store[f"{key}.c"], heads, w2)


def _attention_layer(h: Tensor, graph: GraphBatch, w: LayerWeights, final: bool,
                     e: Tensor | None, return_attention: bool):
    n, b = h.shape[0], h.shape[1]
    heads = w.heads
    d = w.W0.shape[1] // heads
    if h.shape[2] != w.W0.shape[0]:
        raise ValueError(f"feature dim {h.shape[2]} does not match weights {w.W0.shape[0]}")
    src, dst = graph.src, graph.dst
    ne = src.size

    z0 = dc.matmul(h, w.W0).reshape(n, b, heads, d)
    z1 = dc.matmul(h, w.W1).reshape(n, b, heads, d)
    if w.W2 is not None:
        if e is None:
            raise ValueError("edge-feature layer called without edge features")
        if e.shape[0] != ne:
            raise ValueError("missing edge features for some edges")

    if FUSED:
        out, alpha_s, alpha_e = dc.gat_attention(z0, z1, w.c, src, dst, e if w.W2 is not None else None, w.W2)
    else:
        msg = dc.take_rows(z1, src)
        if w.W2 is not None:
            msg = msg + dc.matmul(e, w.W2).reshape(ne, b, heads, d)
        score_e = dc.tsum(dc.leaky_relu(dc.take_rows(z0, dst) + msg) * w.c, axis=-1)
        score_s = dc.tsum(dc.leaky_relu(z0 + z1) * w.c, axis=-1)
        # softmax shift is a constant; gradients are shift-invariant
        shift = np.maximum(score_s.data, _kernels.segment_max(score_e.data, dst, n))
        ex_e = dc.exp(score_e - shift[dst])
        ex_s = dc.exp(score_s - shift)
        denom = ex_s + dc.segment_sum(ex_e, dst, n)
        a_e = ex_e / dc.take_rows(denom, dst)
        a_s = ex_s / denom
        out = a_s.reshape(n, b, heads, 1) * z0 + dc.segment_sum(a_e.reshape(ne, b, heads, 1) * msg, dst, n)
        alpha_s, alpha_e = a_s.data, a_e.data
    if final:
        out = dc.mean(out, axis=2)
    else:
        out = dc.leaky_relu(out.reshape(n, b, heads * d))
    if return_attention:
        return out, alpha_s, alpha_e
    return out


def _batched(h) -> Tensor:
    h = dc.as_tensor(h)
    if h.ndim == 2:
        h = h.reshape(h.shape[0], 1, h.shape[1])
    return h


def gat_layer_x(h, graph, w: LayerWeights, final: bool = False, return_attention: bool = False):
    """One node-feature attention layer; ``h`` is ``(N, F)`` or ``(N, B, F)``."""
    return _attention_layer(_batched(h), as_graph(graph), w, final, None, return_attention)


def gat_layer_xa(h, e, graph, w: LayerWeights, final: bool = False, return_attention: bool = False):
    """Attention layer with edge features ``e`` of shape ``(E, M)`` or ``(E, B, M)``."""
    h = _batched(h)
    e = _batched(e)
    if e.shape[1] != h.shape[1]:
        h = dc.mul(h, np.ones((1, e.shape[1], 1)))
    return _attention_layer(h, as_graph(graph), w, final, e, return_attention)


def gat_stack(store: ParamStore, prefix: str, spec: GatSpec, h, graph, e=None) -> Tensor:
    graph = as_graph(graph)
    h = _batched(h)
    if e is not None:
        e = _batched(e)
        if h.shape[1] != e.shape[1]:
            h = dc.mul(h, np.ones((1, e.shape[1], 1)))
    last = len(spec.dims) - 1
    for layer in range(len(spec.dims)):
        w = layer_weights(store, prefix, layer, spec.heads)
        h = _attention_layer(h, graph, w, layer == last, e, False)
    return h


def embed_x(store: ParamStore, x, graph, spec: GatSpec, prefix: str = "gx") -> Tensor:
    """``[forward-graph GAT || reverse-graph GAT]`` per node, shape ``(N, B, 2H)``."""
    graph = as_graph(graph)
    s_f = gat_stack(store, f"{prefix}f", spec, x, graph)
    s_b = gat_stack(store, f"{prefix}b", spec, x, graph.reverse())
    return dc.concat([s_f, s_b], axis=-1)


def embed_xa(store: ParamStore, x, a, graph, spec: GatSpec, prefix: str = "gxa") -> Tensor:
    """Action-aware embedding; ``a`` is ``(E, Lambda, M)`` edge-major.

    Reverse-graph edge ``i`` is the reversal of forward edge ``i``, so the
    mirrored features ``b[w, v] = a[v, w]`` are the same array.
    """
    graph = as_graph(graph)
    u_f = gat_stack(store, f"{prefix}f", spec, x, graph, a)
    u_b = gat_stack(store, f"{prefix}b", spec, x, graph.reverse(), a)
    return dc.concat([u_f, u_b], axis=-1)


def init_embedding(store: ParamStore, spec: GatSpec, rng: np.random.Generator, prefix: str) -> None:
    init_gat(store, f"{prefix}f", spec, rng)
    init_gat(store, f"{prefix}b", spec, rng)


def layer_shapes(spec: GatSpec) -> Sequence[tuple[int, int]]:
    return [(spec.layer_in(i), d * spec.heads) for i, d in enumerate(spec.dims)]
