"""Time the numba kernels against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``.  Shapes mimic a training
minibatch (64 graphs of ~10 nodes) and a Monte-Carlo rollout batch.
Both paths are called directly, so ``GPP_USE_NUMBA`` does not matter here.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from gpp import _kernels as K


def cases(rng, scale: int):
    n, e, b, h, d, m = 10 * scale, 22 * scale, 64, 2, 32, 2
    src = rng.integers(0, n, e)
    dst = rng.integers(0, n, e)
    z0, z1 = rng.normal(size=(n, b, h, d)), rng.normal(size=(n, b, h, d))
    ev, w2, c = rng.uniform(size=(e, b, m)), rng.normal(size=(m, h, d)), rng.normal(size=(h, d))
    vals = rng.normal(size=(e, b, h))
    fwd_nb = K._attend_fwd_nb(z0, z1, ev, w2, c, src, dst, 0.2)
    g = rng.normal(size=fwd_nb[0].shape)
    a_s, a_e = fwd_nb[1], fwd_nb[2]
    pipe_b, lead_h = 50 * scale, 16
    amounts = rng.uniform(size=(pipe_b, e, m))
    leads = rng.integers(0, lead_h, (pipe_b, e, m))
    flat = vals.reshape(e, -1)
    return {
        "segment_sum": (lambda: K._segment_sum_2d(flat, src, n), lambda: K._segment_sum_np(vals, src, n)),
        "segment_max": (lambda: K._segment_max_2d(flat, src, n, -np.inf),
                        lambda: K._segment_max_np(vals, src, n, -np.inf)),
        "scatter_arrivals": (lambda: K._scatter_arrivals_nb(np.zeros((pipe_b, n, lead_h)), dst, amounts, leads),
                             lambda: K._scatter_arrivals_np(np.zeros((pipe_b, n, lead_h)), dst, amounts, leads)),
        "attend_forward": (lambda: K._attend_fwd_nb(z0, z1, ev, w2, c, src, dst, 0.2),
                           lambda: K._attend_fwd_np(z0, z1, ev, w2, c, src, dst, 0.2)),
        "attend_backward": (lambda: K._attend_bwd_nb(g, z0, z1, ev, w2, c, src, dst, a_s, a_e, 0.2),
                            lambda: K._attend_bwd_np(g, z0, z1, ev, w2, c, src, dst, a_s, a_e, 0.2)),
    }


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scale", type=int, default=1, help="multiply graph size")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (nb, np_) in cases(rng, args.scale).items():
        nb()  # compile
        t_nb = min(timeit.repeat(nb, number=3, repeat=args.repeat)) / 3 * 1e3
        t_np = min(timeit.repeat(np_, number=3, repeat=args.repeat)) / 3 * 1e3
        print(f"{name:<18}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
