import numpy as np
import pytest

from gpp import _kernels as K

pytestmark = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba unavailable")


def _attn_inputs(seed, n=7, e=12, b=2, h=3, d=4, m=2):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n, e)
    dst = (src + rng.integers(1, n, e)) % n
    return (rng.standard_normal((n, b, h, d)), rng.standard_normal((n, b, h, d)), rng.random((e, b, m)),
            rng.standard_normal((m, h, d)), rng.standard_normal((h, d)), src, dst)


def test_segment_ops_agree():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((50, 3, 2))
    ids = rng.integers(0, 9, 50)
    np.testing.assert_allclose(K._segment_sum_2d(v.reshape(50, -1), ids, 9).reshape(9, 3, 2),
                               K._segment_sum_np(v, ids, 9), atol=1e-12)
    np.testing.assert_array_equal(K._segment_max_2d(v.reshape(50, -1), ids, 9, -np.inf).reshape(9, 3, 2),
                                  K._segment_max_np(v, ids, 9, -np.inf))


def test_scatter_agrees():
    rng = np.random.default_rng(1)
    amounts = rng.random((4, 6, 2))
    leads = rng.integers(0, 5, (4, 6, 2))
    dst = rng.integers(0, 3, 6)
    a = np.zeros((4, 3, 5))
    b = np.zeros((4, 3, 5))
    K._scatter_arrivals_nb(a, dst, amounts, leads)
    K._scatter_arrivals_np(b, dst, amounts, leads)
    np.testing.assert_allclose(a, b, atol=1e-14)
    assert a.sum() == pytest.approx(amounts.sum())


@pytest.mark.parametrize("m", [0, 2])
def test_attention_forward_backward_agree(m):
    z0, z1, e, w2, c, src, dst = _attn_inputs(2, m=m)
    out_n, as_n, ae_n = K._attend_fwd_nb(z0, z1, e, w2, c, src, dst, 0.2)
    out_p, as_p, ae_p = K._attend_fwd_np(z0, z1, e, w2, c, src, dst, 0.2)
    np.testing.assert_allclose(out_n, out_p, atol=1e-12)
    np.testing.assert_allclose(as_n, as_p, atol=1e-12)
    np.testing.assert_allclose(ae_n, ae_p, atol=1e-12)
    g = np.random.default_rng(3).standard_normal(out_n.shape)
    bn = K._attend_bwd_nb(g, z0, z1, e, w2, c, src, dst, as_n, ae_n, 0.2)
    bp = K._attend_bwd_np(g, z0, z1, e, w2, c, src, dst, as_p, ae_p, 0.2)
    for x, y in zip(bn, bp):
        np.testing.assert_allclose(x, y, atol=1e-11)


def test_backend_flag_reported():
    assert K.backend() in ("numba", "numpy")
