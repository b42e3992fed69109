"""Hot scatter/gather kernels with a numba path and a pure-numpy fallback.

The numba implementations are used when numba imports cleanly and the
environment variable ``GPP_USE_NUMBA`` is not set to ``0``.  Both paths
produce identical results up to floating-point summation order.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("GPP_USE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = _HAVE_NUMBA and _env_enabled()


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------

def _segment_sum_np(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0]:
        np.add.at(out, ids, values)
    return out


def _segment_max_np(values: np.ndarray, ids: np.ndarray, n: int, fill: float) -> np.ndarray:
    out = np.full((n,) + values.shape[1:], fill, dtype=values.dtype)
    if values.shape[0]:
        np.maximum.at(out, ids, values)
    return out


def _scatter_arrivals_np(pipeline, dst, amounts, leads):
    # pipeline (B, N, H); dst (E,); amounts/leads (B, E, M)
    b, e, m = amounts.shape
    bi = np.broadcast_to(np.arange(b)[:, None, None], (b, e, m))
    di = np.broadcast_to(dst[None, :, None], (b, e, m))
    np.add.at(pipeline, (bi.ravel(), di.ravel(), leads.ravel()), amounts.ravel())


def _messages_np(z1, e, w2, src):
    msg = z1[src]
    if w2.shape[0]:
        msg = msg + np.einsum("ebm,mhk->ebhk", e, w2)
    return msg


def _attend_fwd_np(z0, z1, e, w2, c, src, dst, slope):
    # z0, z1 (N, B, H, D); e (E, B, M); w2 (M, H, D); c (H, D)
    n = z0.shape[0]
    msg = _messages_np(z1, e, w2, src)
    pre_s = z0 + z1
    pre_e = z0[dst] + msg
    sc_s = (np.maximum(pre_s, slope * pre_s) * c).sum(-1)
    sc_e = (np.maximum(pre_e, slope * pre_e) * c).sum(-1)
    shift = np.maximum(sc_s, _segment_max_np(sc_e, dst, n, -np.inf))
    ex_s = np.exp(sc_s - shift)
    ex_e = np.exp(sc_e - shift[dst])
    den = ex_s + _segment_sum_np(ex_e, dst, n)
    a_s = ex_s / den
    a_e = ex_e / den[dst]
    out = a_s[..., None] * z0 + _segment_sum_np(a_e[..., None] * msg, dst, n)
    return out, a_s, a_e


def _attend_bwd_np(g, z0, z1, e, w2, c, src, dst, a_s, a_e, slope):
    n = z0.shape[0]
    msg = _messages_np(z1, e, w2, src)
    gd = g[dst]
    da_s = (g * z0).sum(-1)
    da_e = (gd * msg).sum(-1)
    rho = a_s * da_s + _segment_sum_np(a_e * da_e, dst, n)
    ds_s = a_s * (da_s - rho)
    ds_e = a_e * (da_e - rho[dst])
    pre_s = z0 + z1
    pre_e = z0[dst] + msg
    gpre_s = ds_s[..., None] * c * np.where(pre_s > 0, 1.0, slope)
    gpre_e = ds_e[..., None] * c * np.where(pre_e > 0, 1.0, slope)
    gz0 = a_s[..., None] * g + gpre_s + _segment_sum_np(gpre_e, dst, n)
    gmsg = a_e[..., None] * gd + gpre_e
    gz1 = gpre_s + _segment_sum_np(gmsg, src, n)
    gc = (ds_s[..., None] * np.maximum(pre_s, slope * pre_s)).sum((0, 1)) + \
        (ds_e[..., None] * np.maximum(pre_e, slope * pre_e)).sum((0, 1))
    gw2 = np.einsum("ebm,ebhk->mhk", e, gmsg)
    ge = np.einsum("ebhk,mhk->ebm", gmsg, w2)
    return gz0, gz1, ge, gw2, gc

# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _segment_sum_2d(values, ids, n):  # pragma: no cover - compiled
        out = np.zeros((n, values.shape[1]), dtype=values.dtype)
        for e in range(values.shape[0]):
            s = ids[e]
            for f in range(values.shape[1]):
                out[s, f] += values[e, f]
        return out

    @njit(cache=True)
    def _segment_max_2d(values, ids, n, fill):  # pragma: no cover - compiled
        out = np.full((n, values.shape[1]), fill, dtype=values.dtype)
        for e in range(values.shape[0]):
            s = ids[e]
            for f in range(values.shape[1]):
                v = values[e, f]
                if v > out[s, f]:
                    out[s, f] = v
        return out

    @njit(cache=True)
    def _scatter_arrivals_nb(pipeline, dst, amounts, leads):  # pragma: no cover
        b, e, m = amounts.shape
        for i in range(b):
            for k in range(e):
                d = dst[k]
                for j in range(m):
                    pipeline[i, d, leads[i, k, j]] += amounts[i, k, j]

    @njit(cache=True, error_model="numpy")
    def _edge_message(z1, e, w2, s, j, b, h, buf):  # pragma: no cover
        d = buf.shape[0]
        for k in range(d):
            buf[k] = z1[s, b, h, k]
        for m in range(w2.shape[0]):
            x = e[j, b, m]
            if x != 0.0:
                for k in range(d):
                    buf[k] += x * w2[m, h, k]

    @njit(cache=True, error_model="numpy")
    def _attend_fwd_nb(z0, z1, e, w2, c, src, dst, slope):  # pragma: no cover
        n, nb, nh, d = z0.shape
        ne = src.shape[0]
        a_s = np.empty((n, nb, nh))
        a_e = np.empty((ne, nb, nh))
        shift = np.empty((n, nb, nh))
        den = np.empty((n, nb, nh))
        msg = np.empty(d)
        for i in range(n):
            for b in range(nb):
                for h in range(nh):
                    acc = 0.0
                    for k in range(d):
                        v = z0[i, b, h, k] + z1[i, b, h, k]
                        acc += c[h, k] * (v if v > 0.0 else slope * v)
                    a_s[i, b, h] = acc
                    shift[i, b, h] = acc
        for j in range(ne):
            s = src[j]
            t = dst[j]
            for b in range(nb):
                for h in range(nh):
                    _edge_message(z1, e, w2, s, j, b, h, msg)
                    acc = 0.0
                    for k in range(d):
                        v = z0[t, b, h, k] + msg[k]
                        acc += c[h, k] * (v if v > 0.0 else slope * v)
                    a_e[j, b, h] = acc
                    if acc > shift[t, b, h]:
                        shift[t, b, h] = acc
        for i in range(n):
            for b in range(nb):
                for h in range(nh):
                    a_s[i, b, h] = np.exp(a_s[i, b, h] - shift[i, b, h])
                    den[i, b, h] = a_s[i, b, h]
        for j in range(ne):
            t = dst[j]
            for b in range(nb):
                for h in range(nh):
                    a_e[j, b, h] = np.exp(a_e[j, b, h] - shift[t, b, h])
                    den[t, b, h] += a_e[j, b, h]
        out = np.empty((n, nb, nh, d))
        for i in range(n):
            for b in range(nb):
                for h in range(nh):
                    a_s[i, b, h] /= den[i, b, h]
                    w = a_s[i, b, h]
                    for k in range(d):
                        out[i, b, h, k] = w * z0[i, b, h, k]
        for j in range(ne):
            s = src[j]
            t = dst[j]
            for b in range(nb):
                for h in range(nh):
                    a_e[j, b, h] /= den[t, b, h]
                    w = a_e[j, b, h]
                    _edge_message(z1, e, w2, s, j, b, h, msg)
                    for k in range(d):
                        out[t, b, h, k] += w * msg[k]
        return out, a_s, a_e

    @njit(cache=True, error_model="numpy")
    def _attend_bwd_nb(g, z0, z1, e, w2, c, src, dst, a_s, a_e, slope):  # pragma: no cover
        n, nb, nh, d = z0.shape
        ne = src.shape[0]
        nm = w2.shape[0]
        gz0 = np.zeros((n, nb, nh, d))
        gz1 = np.zeros((n, nb, nh, d))
        ge = np.zeros((ne, nb, nm))
        gw2 = np.zeros((nm, nh, d))
        gc = np.zeros((nh, d))
        da_e = np.empty((ne, nb, nh))
        rho = np.empty((n, nb, nh))
        da_s = np.empty((n, nb, nh))
        msg = np.empty(d)
        gm = np.empty(d)
        for i in range(n):
            for b in range(nb):
                for h in range(nh):
                    acc = 0.0
                    for k in range(d):
                        acc += g[i, b, h, k] * z0[i, b, h, k]
                    da_s[i, b, h] = acc
                    rho[i, b, h] = a_s[i, b, h] * acc
        for j in range(ne):
            s = src[j]
            t = dst[j]
            for b in range(nb):
                for h in range(nh):
                    _edge_message(z1, e, w2, s, j, b, h, msg)
                    acc = 0.0
                    for k in range(d):
                        acc += g[t, b, h, k] * msg[k]
                    da_e[j, b, h] = acc
                    rho[t, b, h] += a_e[j, b, h] * acc
        for i in range(n):
            for b in range(nb):
                for h in range(nh):
                    ds = a_s[i, b, h] * (da_s[i, b, h] - rho[i, b, h])
                    w = a_s[i, b, h]
                    for k in range(d):
                        v = z0[i, b, h, k] + z1[i, b, h, k]
                        if v > 0.0:
                            gp = ds * c[h, k]
                            gc[h, k] += ds * v
                        else:
                            gp = ds * c[h, k] * slope
                            gc[h, k] += ds * slope * v
                        gz0[i, b, h, k] += w * g[i, b, h, k] + gp
                        gz1[i, b, h, k] += gp
        for j in range(ne):
            s = src[j]
            t = dst[j]
            for b in range(nb):
                for h in range(nh):
                    ds = a_e[j, b, h] * (da_e[j, b, h] - rho[t, b, h])
                    w = a_e[j, b, h]
                    _edge_message(z1, e, w2, s, j, b, h, msg)
                    for k in range(d):
                        v = z0[t, b, h, k] + msg[k]
                        if v > 0.0:
                            gp = ds * c[h, k]
                            gc[h, k] += ds * v
                        else:
                            gp = ds * c[h, k] * slope
                            gc[h, k] += ds * slope * v
                        gz0[t, b, h, k] += gp
                        gm[k] = w * g[t, b, h, k] + gp
                        gz1[s, b, h, k] += gm[k]
                    for m in range(nm):
                        x = e[j, b, m]
                        acc = 0.0
                        for k in range(d):
                            acc += w2[m, h, k] * gm[k]
                            gw2[m, h, k] += x * gm[k]
                        ge[j, b, m] += acc
        return gz0, gz1, ge, gw2, gc

# --------------------------------------------------------------------------
# public dispatchers
# --------------------------------------------------------------------------

def segment_sum(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets keyed by ``ids`` (axis 0)."""
    if not USE_NUMBA:
        return _segment_sum_np(values, ids, n)
    flat = np.ascontiguousarray(values.reshape(values.shape[0], int(np.prod(values.shape[1:]))))
    out = _segment_sum_2d(flat, ids, n)
    return out.reshape((n,) + values.shape[1:])


def segment_max(values: np.ndarray, ids: np.ndarray, n: int, fill: float = -np.inf) -> np.ndarray:
    """Row-wise maximum per bucket; empty buckets hold ``fill``."""
    if not USE_NUMBA:
        return _segment_max_np(values, ids, n, fill)
    flat = np.ascontiguousarray(values.reshape(values.shape[0], int(np.prod(values.shape[1:]))))
    out = _segment_max_2d(flat, ids, n, fill)
    return out.reshape((n,) + values.shape[1:])


def scatter_arrivals(pipeline: np.ndarray, dst: np.ndarray, amounts: np.ndarray, leads: np.ndarray) -> None:
    """In place: ``pipeline[b, dst[e], leads[b, e, m]] += amounts[b, e, m]``."""
    if amounts.size == 0:
        return
    if not USE_NUMBA:
        _scatter_arrivals_np(pipeline, dst, amounts, leads)
        return
    _scatter_arrivals_nb(
        pipeline,
        np.ascontiguousarray(dst, dtype=np.int64),
        np.ascontiguousarray(amounts, dtype=np.float64),
        np.ascontiguousarray(leads, dtype=np.int64),
    )


def _c3(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def attend_forward(z0, z1, e, w2, c, src, dst, slope):
    """Fused GATv2 attention: messages, scores, per-destination softmax, aggregation.

    Shapes: ``z0, z1 (N, B, H, D)``, edge features ``e (E, B, M)`` with
    projection ``w2 (M, H, D)`` (``M`` may be 0), ``c (H, D)``.  Neighbor
    messages are ``z1[src] + e @ w2``; the self term uses ``z0`` and no edge
    feature.  Returns ``(out (N, B, H, D), alpha_self (N, B, H), alpha_edge (E, B, H))``.
    """
    if not USE_NUMBA:
        return _attend_fwd_np(z0, z1, e, w2, c, src, dst, slope)
    return _attend_fwd_nb(_c3(z0), _c3(z1), _c3(e), _c3(w2), _c3(c), src.astype(np.int64),
                          dst.astype(np.int64), float(slope))


def attend_backward(g, z0, z1, e, w2, c, src, dst, a_s, a_e, slope):
    """Vector-Jacobian product of :func:`attend_forward` for ``(z0, z1, e, w2, c)``."""
    if not USE_NUMBA:
        return _attend_bwd_np(g, z0, z1, e, w2, c, src, dst, a_s, a_e, slope)
    return _attend_bwd_nb(_c3(g), _c3(z0), _c3(z1), _c3(e), _c3(w2), _c3(c), src.astype(np.int64),
                          dst.astype(np.int64), _c3(a_s), _c3(a_e), float(slope))


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
