import numpy as np
import pytest

from routefp import kernels
from routefp.errors import InvalidConfigError
from routefp.kernels import numpy_ops

numba_ops = pytest.importorskip("routefp.kernels.numba_ops")


def _toy_inputs(seed=0, B=9, L=3, d=6, dh=10, d_in=5):
    gen = np.random.default_rng(seed)
    return dict(
        proj=gen.standard_normal((d, d_in)),
        aW=0.2 * gen.standard_normal((L, d, d)),
        ab=0.1 * gen.standard_normal((L, d)),
        W1=gen.standard_normal((L, dh, d)) / np.sqrt(d),
        b1=0.1 * gen.standard_normal((L, dh)),
        W2=gen.standard_normal((L, d, dh)) / np.sqrt(dh),
        b2=0.1 * gen.standard_normal((L, d)),
        X=gen.standard_normal((B, d_in)),
    )


def _moe_extra(seed=1, L=3, d=6, dh=10, E=4):
    gen = np.random.default_rng(seed)
    return dict(
        bW1=0.3 * gen.standard_normal((L, E, dh, d)),
        bb1=0.1 * gen.standard_normal((L, E, dh)),
        bW2=0.3 * gen.standard_normal((L, E, d, dh)),
        bb2=0.1 * gen.standard_normal((L, E, d)),
        rW=gen.standard_normal((L, E, d)),
        rb=0.1 * gen.standard_normal((L, E)),
        tau=1.0,
    )


def test_backend_listing_and_selection():
    names = kernels.available_backends()
    assert "numpy" in names and "numba" in names
    old = kernels.get_backend()
    try:
        kernels.set_backend("numpy")
        assert kernels.get_backend() == "numpy"
    finally:
        kernels.set_backend(old)
    with pytest.raises(InvalidConfigError):
        kernels.set_backend("cuda")


def test_toy_forward_backends_agree():
    kw = _toy_inputs()
    out_np = numpy_ops.toy_forward(**kw)
    out_nb = numba_ops.toy_forward(**kw)
    for a, b in zip(out_np, out_nb):
        assert np.allclose(a, b, atol=1e-9, rtol=1e-9)


def test_toy_backward_backends_agree():
    kw = _toy_inputs()
    out, xin, h, act = numpy_ops.toy_forward(**kw)
    gout = np.random.default_rng(3).standard_normal(out.shape)
    g_np = numpy_ops.toy_backward(kw["aW"], kw["W1"], kw["W2"], xin, h, act, gout)
    g_nb = numba_ops.toy_backward(kw["aW"], kw["W1"], kw["W2"], xin, h, act, gout)
    for a, b in zip(g_np, g_nb):
        assert np.allclose(a, b, atol=1e-9, rtol=1e-9)


def test_moe_forward_backends_agree():
    kw = _toy_inputs()
    kw.update(_moe_extra())
    out_np = numpy_ops.moe_forward(**kw)
    out_nb = numba_ops.moe_forward(**kw)
    for a, b in zip(out_np, out_nb):
        assert np.allclose(a, b, atol=1e-9, rtol=1e-9)


def test_numba_backend_is_bit_deterministic():
    kw = _toy_inputs(seed=5)
    kw.update(_moe_extra(seed=6))
    a = numba_ops.moe_forward(**kw)
    b = numba_ops.moe_forward(**kw)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_moe_routing_rows_normalized():
    kw = _toy_inputs(seed=2)
    kw.update(_moe_extra(seed=4))
    _, _, alpha, _ = numpy_ops.moe_forward(**kw)
    assert np.all(alpha >= 0)
    assert np.sum(alpha, axis=2) == pytest.approx(np.ones(alpha.shape[:2]), abs=1e-12)


def test_warmup_runs():
    kernels.warmup()
