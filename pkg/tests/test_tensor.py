import numpy as np
import pytest

from vebm.tensor import Graph, GraphError, NonFiniteError, backward, finite_diff_grad, forward


def _toy():
    g = Graph()
    y = g.input("Y")
    w = g.param("w")
    out = g.op("sum", g.op("mul", y, w))
    g.outputs = [out]
    return g, out


def test_docstring_example():
    g, out = _toy()
    vals = forward(g, {"Y": np.ones(3), "w": np.arange(3.0)})
    assert vals[out] == pytest.approx(3.0)
    grads = backward(g, vals, out)
    np.testing.assert_array_equal(grads[g.id_of("w")], np.ones(3))
    np.testing.assert_array_equal(grads[g.id_of("Y")], np.arange(3.0))


def test_default_dtype_is_float32_and_overridable():
    g, out = _toy()
    assert forward(g, {"Y": np.ones(2), "w": np.ones(2)})[out].dtype == np.float32
    assert forward(g, {"Y": np.ones(2), "w": np.ones(2)}, dtype=np.float64)[out].dtype == np.float64


def test_unbound_leaf():
    g, _ = _toy()
    with pytest.raises(GraphError, match="unbound"):
        forward(g, {"Y": np.ones(2)})


def test_duplicate_and_unknown():
    g = Graph()
    g.input("Y")
    with pytest.raises(GraphError):
        g.input("Y")
    with pytest.raises(GraphError):
        g.op("no-such-op", 0)
    with pytest.raises(GraphError):
        g.op("relu", 5)
    with pytest.raises(GraphError):
        g.id_of("missing")


def test_nonfinite_input_and_forward():
    g, _ = _toy()
    with pytest.raises(NonFiniteError):
        forward(g, {"Y": np.array([np.nan, 1.0]), "w": np.ones(2)})
    with pytest.raises(NonFiniteError):
        forward(g, {"Y": np.array([3e38, 3e38]), "w": np.array([10.0, 10.0])})


def test_shape_mismatch_is_graph_error():
    g, _ = _toy()
    with pytest.raises(GraphError):
        forward(g, {"Y": np.ones(3), "w": np.ones(2)})


def test_backward_requires_scalar_or_seed():
    g = Graph()
    y = g.input("Y")
    r = g.op("relu", y)
    vals = forward(g, {"Y": np.array([-1.0, 2.0])})
    with pytest.raises(GraphError, match="scalar"):
        backward(g, vals, r)
    with pytest.raises(GraphError):
        backward(g, vals, r, seed_grad=np.ones(3))
    grads = backward(g, vals, r, seed_grad=np.ones(2))
    np.testing.assert_array_equal(grads[y], [0.0, 1.0])


def test_fanout_accumulates():
    g = Graph()
    y = g.input("Y")
    out = g.op("sum", g.op("add", y, y))
    grads = backward(g, forward(g, {"Y": np.ones(4)}), out)
    np.testing.assert_array_equal(grads[y], np.full(4, 2.0))


def test_wrt_prunes_and_const_gets_no_grad():
    g = Graph()
    y = g.input("Y")
    c = g.const("c")
    w = g.param("w")
    out = g.op("sum", g.op("mul", g.op("mul", y, c), w))
    vals = forward(g, {"Y": np.ones(2), "c": np.full(2, 3.0), "w": np.ones(2)})
    grads = backward(g, vals, out, wrt=["w"])
    assert w in grads and y not in grads and c not in grads
    np.testing.assert_allclose(grads[w], [3.0, 3.0])


def test_finite_diff_matches_on_smooth_function():
    g = Graph()
    y = g.input("Y")
    out = g.op("sum", g.op("tanh", g.op("mul", y, y)))
    g.outputs = [out]
    x = np.random.default_rng(0).standard_normal(6)
    num = finite_diff_grad(g, {"Y": x}, "Y")
    ana = backward(g, forward(g, {"Y": x}, dtype=np.float64), out)[y]
    np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(g, {"Y": x}, "Y", h=0)
