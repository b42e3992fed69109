"""Minimal reverse-mode differentiation over numpy arrays.

Only the primitives the attention and MLP networks need are provided.  Every
op builds its output eagerly and, when gradients are enabled and an input
requires them, records a closure computing the vector-Jacobian product.
"""
from __future__ import annotations

import contextlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import _kernels

_GRAD_ENABLED = True
CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                if CHECK_FINITE and not np.isfinite(np.add.reduce(pg, axis=None)):
                    raise NonFiniteError(f"non-finite gradient produced by backward of '{node.op}'")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def matmul(a, w) -> Tensor:
    """``a (..., F) @ w (F, O)``."""
    a, w = as_tensor(a), as_tensor(w)
    lead = a.data.shape[:-1]
    # one flat GEMM; a stacked matmul over leading axes is far slower
    out = (a.data.reshape(-1, a.data.shape[-1]) @ w.data).reshape(lead + (w.data.shape[-1],))

    def bw(g):
        ga = (g.reshape(-1, g.shape[-1]) @ w.data.T).reshape(a.data.shape) if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _make(out, (a, w), bw, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather along axis 0; the adjoint is a segment sum."""
    a = as_tensor(a)
    n = a.data.shape[0]
    return _make(a.data[idx], (a,), lambda g: (_kernels.segment_sum(g, idx, n),), "take_rows")


def segment_sum(a, ids: np.ndarray, n: int) -> Tensor:
    a = as_tensor(a)
    return _make(_kernels.segment_sum(a.data, ids, n), (a,), lambda g: (g[ids],), "segment_sum")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), bw, "concat")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


LEAKY_SLOPE = 0.2


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, slope * a.data) if slope <= 1.0 else np.minimum(a.data, slope * a.data)

    def bw(g):
        d = np.where(a.data > 0, 1.0, slope)
        return (g * d,)

    return _make(out, (a,), bw, "leaky_relu")


def gat_attention(z0, z1, c, src: np.ndarray, dst: np.ndarray, e=None, w2=None, slope: float = LEAKY_SLOPE):
    """Fused dynamic attention over ``{self} U in-neighbors`` of every node.

    ``z0, z1 (N, B, H, D)`` are the self/neighbor projections and ``c (H, D)``
    the attention vectors.  Edge ``j`` carries the message
    ``m_j = z1[src_j] + e_j @ w2`` (edge term optional, ``e (E, B, M)``,
    ``w2 (M, H*D)``).  Scores are ``c . LeakyReLU(z0_i + z1_i)`` for the self
    term and ``c . LeakyReLU(z0[dst_j] + m_j)`` for edges; the output is
    ``alpha_self * z0 + sum_j alpha_j * m_j``.
    Returns ``(out, alpha_self (N, B, H), alpha_edge (E, B, H))``.
    """
    z0, z1, c = as_tensor(z0), as_tensor(z1), as_tensor(c)
    n, b, h, d = z0.data.shape
    ne = int(np.size(src))
    if e is None:
        e, w2 = Tensor(np.zeros((ne, b, 0))), Tensor(np.zeros((0, h * d)))
    e, w2 = as_tensor(e), as_tensor(w2)
    w2r = w2.data.reshape(-1, h, d)
    args = (z0.data, z1.data, e.data, w2r, c.data)
    out, a_s, a_e = _kernels.attend_forward(*args, src, dst, slope)

    def bw(g):
        gz0, gz1, ge, gw2, gc = _kernels.attend_backward(g, *args, src, dst, a_s, a_e, slope)
        return gz0, gz1, gc, ge, gw2.reshape(w2.data.shape)

    res = _make(out, (z0, z1, c, e, w2), bw, "gat_attention")
    return res, a_s, a_e


def minimum_scalar(a, c: float) -> Tensor:
    """``min(a, c)``; at ties the gradient flows to ``a``."""
    a = as_tensor(a)
    keep = a.data <= c
    return _make(np.where(keep, a.data, c), (a,), lambda g: (np.where(keep, g, 0.0),), "minimum")


def maximum_scalar(a, c: float) -> Tensor:
    """``max(a, c)``; at ties the gradient flows to the constant."""
    a = as_tensor(a)
    keep = a.data > c
    return _make(np.where(keep, a.data, c), (a,), lambda g: (np.where(keep, g, 0.0),), "maximum")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with a stable insertion order."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, trainable: bool = True):
        self._t: "OrderedDict[str, Tensor]" = OrderedDict()
        self.trainable = trainable
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=self.trainable)
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._t.items())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (k, np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self._t.items()
        )

    def copy(self, trainable: bool | None = None) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self._t.items()},
                          self.trainable if trainable is None else trainable)

    def frozen(self) -> "ParamStore":
        """View sharing storage but excluded from differentiation."""
        view = ParamStore(trainable=False)
        for k, t in self._t.items():
            view._t[k] = Tensor(t.data, requires_grad=False)
        return view

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._t.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if list(state) != self.names():
            raise KeyError("parameter names differ")
        for k, v in state.items():
            if np.shape(v) != self._t[k].data.shape:
                raise ValueError(f"shape mismatch for {k}")
            self._t[k].data[...] = v

    def equals(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self.names()
        )


class TargetParams(ParamStore):
    """Frozen copy of a parameter store; changed only by ``soft_update``."""

    def __init__(self, source: ParamStore):
        super().__init__({k: t.data.copy() for k, t in source.items()}, trainable=False)


def soft_update(target: TargetParams, source: ParamStore, tau: float) -> TargetParams:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if target.names() != source.names():
        raise KeyError("parameter names differ")
    for k, t in target.items():
        s = source[k].data
        if s.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {k}")
        if tau == 1.0:
            t.data[...] = s
        elif tau > 0.0:
            t.data[...] = tau * s + (1.0 - tau) * t.data
    return target


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: OptimizerState) -> ParamStore:
    """One bias-corrected Adam update, in place; returns ``params``."""
    for k, g in grads.items():
        if np.shape(g) != params[k].data.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = params[k].data
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def finite_diff_check(loss_fn: Callable[[], Tensor], params: ParamStore, h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backprop gradients with central differences.

    For each parameter array the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)`` over the
    checked coordinates (all, or ``max_coords`` sampled per array); the
    maximum over arrays is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    loss.backward()
    analytic = params.grads()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            num = np.empty(idx.size)
            for i, j in enumerate(idx):
                old = flat[j]
                flat[j] = old + h
                fp = loss_fn().item()
                flat[j] = old - h
                fm = loss_fn().item()
                flat[j] = old
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("loss is not finite under perturbation")
                num[i] = (fp - fm) / (2.0 * h)
            an = analytic[name].reshape(-1)[idx]
            denom = max(np.linalg.norm(an), np.linalg.norm(num), 1e-12)
            worst = max(worst, float(np.linalg.norm(an - num) / denom))
    return worst


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"GPPCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, stores: Mapping[str, ParamStore], meta: Mapping | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, raw f64 LE data."""
    entries = []
    blobs = []
    offset = 0
    for group, store in stores.items():
        for name, arr in store.arrays().items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = json.dumps({"version": CKPT_VERSION, "dtype": "<f8", "entries": entries,
                         "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, ParamStore], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    groups: dict[str, OrderedDict] = OrderedDict()
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=base + e["offset"]).reshape(tuple(e["shape"])).copy()
        groups.setdefault(e["group"], OrderedDict())[e["name"]] = a
    return {g: ParamStore(arrs) for g, arrs in groups.items()}, header["meta"]


def checkpoint_to_json(stores: Mapping[str, ParamStore]) -> dict:
    return {
        "format": "gpp-params",
        "version": CKPT_VERSION,
        "groups": {
            g: [{"name": k, "shape": list(a.shape), "values": a.reshape(-1).tolist()}
                for k, a in s.arrays().items()]
            for g, s in stores.items()
        },
    }


def checkpoint_from_json(doc: Mapping) -> dict[str, ParamStore]:
    if doc.get("format") != "gpp-params":
        raise ValueError("not a parameter document")
    return {
        g: ParamStore(OrderedDict((e["name"], np.array(e["values"], dtype=np.float64).reshape(tuple(e["shape"])))
                                  for e in entries))
        for g, entries in doc["groups"].items()
    }
