import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import conv3d_loop, deconv3d_loop, maxpool3d_loop
from vebm import kernels
from vebm.tensor import Graph, forward

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


def _conv(x, w, b=None, stride=1):
    g = Graph(np.float64)
    ids = [g.input("x"), g.param("w")] + ([g.param("b")] if b is not None else [])
    y = g.op("conv3d", *ids, stride=stride)
    bind = {"x": x, "w": w} | ({"b": b} if b is not None else {})
    return forward(g, bind)[y]


def _deconv(x, w, b=None, up=1):
    g = Graph(np.float64)
    ids = [g.input("x"), g.param("w")] + ([g.param("b")] if b is not None else [])
    y = g.op("deconv3d", *ids, up=up)
    bind = {"x": x, "w": w} | ({"b": b} if b is not None else {})
    return forward(g, bind)[y]


def _pool(x, k):
    g = Graph(np.float64)
    y = g.op("maxpool3d", g.input("x"), kernel=k)
    return forward(g, {"x": x})[y]


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    monkeypatch.setattr(kernels, "_impl", kernels.using(request.param))
    return request.param


@pytest.mark.parametrize("seed", range(6))
def test_conv_matches_loop_oracle(backend, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    k = int(rng.integers(1, 5))
    s = int(rng.integers(1, 4))
    x = rng.standard_normal((2, 2, n, n - 1 if n > 3 else n, n))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(_conv(x, w, b, s), conv3d_loop(x, w, b, s), atol=1e-5)


@pytest.mark.parametrize("seed", range(6))
def test_deconv_matches_loop_oracle(backend, seed):
    rng = np.random.default_rng(seed + 100)
    n = int(rng.integers(1, 4))
    up = int(rng.integers(1, 3))
    k = int(rng.integers(1, 5))
    x = rng.standard_normal((2, 2, n, n, n + 1))
    w = rng.standard_normal((2, 3, k, k, k))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(_deconv(x, w, b, up), deconv3d_loop(x, w, b, up), atol=1e-5)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_pool_matches_loop_oracle(backend, k):
    x = np.random.default_rng(k).standard_normal((2, 3, 6, 5, 4))
    np.testing.assert_allclose(_pool(x, k), maxpool3d_loop(x, k), atol=0)


@pytest.mark.parametrize("seed", range(5))
def test_deconv_is_adjoint_of_conv(backend, seed):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(1, 4))
    k = int(rng.integers(2, 6))
    m = int(rng.integers(1, 4))
    X = rng.standard_normal((2, 2, m * s, m * s, m * s))
    W = rng.standard_normal((3, 2, k, k, k))
    Yc = rng.standard_normal((2, 3, m, m, m))
    lhs = np.sum(_conv(X, W, stride=s) * Yc)
    rhs = np.sum(X * _deconv(Yc, W, up=s))
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1e-12)


def test_adjoint_small_oracle():
    # X=ones(1,1,2,2,2), W=ones(1,1,2,2,2), stride 2: conv is the block sum 8, deconv(1) paints ones
    X = np.ones((1, 1, 2, 2, 2))
    W = np.ones((1, 1, 2, 2, 2))
    assert _conv(X, W, stride=2).item() == 8.0
    np.testing.assert_array_equal(_deconv(np.ones((1, 1, 1, 1, 1)), W, up=2), X)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    py, cy = kernels.using("python"), kernels.using("cython")
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        xp = rng.standard_normal((2, 3, 7, 6, 5)).astype(dtype)
        a = py.im2col3d(xp, (3, 2, 2), (2, 2, 1), (3, 3, 4))
        b = cy.im2col3d(xp, (3, 2, 2), (2, 2, 1), (3, 3, 4))
        assert a.dtype == b.dtype == dtype
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(py.col2im3d(a, (7, 6, 5), (2, 2, 1)), cy.col2im3d(a, (7, 6, 5), (2, 2, 1)), rtol=1e-12)
        x = rng.standard_normal((2, 2, 5, 4, 3)).astype(dtype)
        (o1, i1), (o2, i2) = py.maxpool3d_forward(x, (2, 2, 2)), cy.maxpool3d_forward(x, (2, 2, 2))
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(i1, i2)
        g = rng.standard_normal(o1.shape).astype(dtype)
        np.testing.assert_array_equal(py.maxpool3d_backward(g, i1, (5, 4, 3)), cy.maxpool3d_backward(g, i1, (5, 4, 3)))


def test_env_forces_fallback():
    code = "from vebm import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, VEBM_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.using("fortran")
