import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpatch.autodiff import (
    Graph,
    GraphError,
    NumericError,
    ShapeError,
    as_tensor,
    forward,
    grad_check,
    l2_normalize_rows,
)


def rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def rand(r, shape, lo=-1.0, hi=1.0):
    return (r.uniform(lo, hi, size=shape)).astype(np.float32)


# ---------------------------------------------------------------- forward

def test_softmax_uniform_on_equal_logits():
    g = Graph()
    x = g.input("x", (1, 3))
    g.output("y", g.softmax(x))
    y = forward(g, {"x": np.zeros((1, 3), np.float32)})["y"]
    np.testing.assert_allclose(y, np.full((1, 3), 1 / 3), rtol=1e-6)
    assert abs(y.sum() - 1.0) < 1e-6


def test_l2_normalize_345_triangle():
    g = Graph()
    x = g.input("x", (1, 2))
    g.output("y", g.l2_normalize(x))
    y = forward(g, {"x": np.array([[3.0, 4.0]], np.float32)})["y"]
    np.testing.assert_allclose(y, [[0.6, 0.8]], rtol=1e-6)


def test_mse_identity_is_zero():
    r = rng(0)
    a = rand(r, (4, 5))
    g = Graph()
    pa = g.parameter("a", a)
    pb = g.parameter("b", a.copy(), trainable=False)
    g.output("loss", g.mse_loss(pa, pb))
    assert forward(g)["loss"] == 0.0


def test_forward_is_pure_and_deterministic():
    r = rng(1)
    g = Graph()
    x = g.input("x", (2, 4))
    w = g.parameter("w", rand(r, (4, 4)))
    g.output("y", g.tanh(g.matmul(x, w)))
    xin = {"x": rand(r, (2, 4))}
    y1 = forward(g, xin)["y"]
    y2 = forward(g, xin)["y"]
    assert y1.tobytes() == y2.tobytes()


def test_nan_input_raises():
    g = Graph()
    x = g.input("x", (2,))
    g.output("y", g.tanh(x))
    with pytest.raises(NumericError):
        forward(g, {"x": np.array([np.nan, 0.0], np.float32)})


def test_shape_error_names_node():
    g = Graph()
    a = g.input("a", (2, 3))
    b = g.input("b", (2, 3))
    with pytest.raises(ShapeError, match="matmul"):
        g.matmul(a, b)


def test_concat_and_slice_roundtrip():
    r = rng(2)
    x = rand(r, (2, 6))
    g = Graph()
    xin = g.input("x", (2, 6))
    left = g.slice(xin, axis=1, start=0, stop=2)
    right = g.slice(xin, axis=1, start=2, stop=6)
    g.output("y", g.concat([left, right], axis=1))
    np.testing.assert_array_equal(forward(g, {"x": x})["y"], x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 5), elements=st.floats(-10, 10, width=32)))
def test_softmax_rows_sum_to_one(x):
    g = Graph()
    xin = g.input("x", (3, 5))
    g.output("y", g.softmax(xin))
    y = forward(g, {"x": x})["y"]
    assert np.all(y > 0) and np.all(y < 1)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (4, 6),
              elements=st.floats(-100, 100, width=32)))
def test_l2_normalize_unit_norm(x):
    out, zero = l2_normalize_rows(x)
    norms = np.linalg.norm(out, axis=-1)
    for n, z in zip(norms, zero):
        if z:
            assert n == 0.0
        else:
            assert abs(n - 1.0) < 1e-6


def test_l2_normalize_zero_row_flagged():
    g = Graph()
    x = g.input("x", (2, 3))
    y = g.l2_normalize(x)
    g.output("y", y)
    run = g.run({"x": np.array([[0, 0, 0], [1, 2, 2]], np.float32)})
    assert y.name in run.zero_norm_nodes
    np.testing.assert_array_equal(run.outputs["y"][0], 0.0)


# ---------------------------------------------------------------- backward

def test_softmax_ce_gradient_identity():
    # gradient wrt logits is softmax(logits) - onehot(target), single row
    r = rng(3)
    z = rand(r, (1, 5), -2, 2)
    t = np.zeros((1, 5), np.float32)
    t[0, 2] = 1.0
    g = Graph()
    zp = g.parameter("z", z)
    tp = g.parameter("t", t, trainable=False)
    loss = g.output("loss", g.softmax_cross_entropy(zp, tp))
    grads = g.run().backward(loss)
    z64 = z.astype(np.float64)
    p = np.exp(z64 - z64.max()) / np.exp(z64 - z64.max()).sum()
    np.testing.assert_allclose(grads["z"], p - t, atol=1e-6)


def test_tanh_gradient_at_zero_is_one():
    g = Graph()
    x = g.parameter("x", np.zeros((1, 1), np.float32))
    loss = g.output("loss", g.mean_pool(g.mean_pool(g.tanh(x), 0), 0))
    grads = g.run().backward(loss)
    np.testing.assert_allclose(grads["x"], 1.0, atol=1e-7)


def test_mse_gradient_formula():
    r = rng(4)
    a, b = rand(r, (3, 4)), rand(r, (3, 4))
    g = Graph()
    pa = g.parameter("a", a)
    pb = g.parameter("b", b)
    loss = g.output("loss", g.mse_loss(pa, pb))
    grads = g.run().backward(loss)
    np.testing.assert_allclose(grads["a"], 2 * (a - b) / a.size, atol=1e-6)
    np.testing.assert_allclose(grads["b"], -2 * (a - b) / a.size, atol=1e-6)


def test_frozen_leaf_gets_no_gradient():
    r = rng(5)
    g = Graph()
    w = g.parameter("w", rand(r, (4, 4)))
    f = g.parameter("f", rand(r, (4, 4)), trainable=False)
    loss = g.output("loss", g.mse_loss(g.matmul(w, f), f))
    grads = g.run().backward(loss)
    assert "w" in grads and "f" not in grads


def test_backward_rejects_nonscalar_loss():
    g = Graph()
    x = g.parameter("x", np.ones((2, 2), np.float32))
    y = g.tanh(x)
    with pytest.raises(GraphError, match="scalar"):
        g.run().backward(y)


# ---------------------------------------------------------------- grad_check

def scalarize(g, node, seed):
    """Reduce to scalar against a fixed random target through mse."""
    r = rng(seed ^ 0x5EED)
    tgt = g.parameter(
        "target", rand(r, node.shape), trainable=False
    )
    return g.output("loss", g.mse_loss(node, tgt))


def check_primitive(build, seeds=range(20), eps=1e-3, tol=1e-3):
    worst = 0.0
    for seed in seeds:
        g, loss, leaves, inputs = build(seed)
        for leaf in leaves:
            err = grad_check(g, loss, leaf, eps, inputs)
            worst = max(worst, err)
    assert worst < tol, f"max relative error {worst}"


def test_grad_matmul_all_transposes():
    def build(seed):
        r = rng(seed)
        ta, tb = bool(seed % 2), bool((seed // 2) % 2)
        g = Graph()
        a = g.parameter("a", rand(r, (3, 4) if not ta else (4, 3)))
        b = g.parameter("b", rand(r, (4, 2) if not tb else (2, 4)))
        y = g.matmul(a, b, transpose_a=ta, transpose_b=tb)
        return g, scalarize(g, y, seed), ["a", "b"], None
    check_primitive(build)


def test_grad_matmul_batched():
    def build(seed):
        r = rng(seed)
        g = Graph()
        a = g.parameter("a", rand(r, (2, 3, 4)))
        b = g.parameter("b", rand(r, (4, 3)))
        y = g.matmul(a, b)
        return g, scalarize(g, y, seed), ["a", "b"], None
    check_primitive(build)


@pytest.mark.parametrize("op", ["gelu", "tanh", "sigmoid", "softmax",
                                "l2_normalize"])
def test_grad_elementwise_and_rowwise(op):
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.parameter("x", rand(r, (3, 6), -2, 2))
        y = getattr(g, op)(x)
        return g, scalarize(g, y, seed), ["x"], None
    check_primitive(build)


def test_grad_add_broadcast():
    def build(seed):
        r = rng(seed)
        g = Graph()
        a = g.parameter("a", rand(r, (4, 5)))
        b = g.parameter("b", rand(r, (5,)))
        y = g.add(a, b)
        return g, scalarize(g, y, seed), ["a", "b"], None
    check_primitive(build)


def test_grad_scale_by_scalar_node():
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.parameter("x", rand(r, (3, 3)))
        s = g.parameter("s", np.array([0.7], np.float32))
        y = g.scale(x, s)
        return g, scalarize(g, y, seed), ["x", "s"], None
    check_primitive(build)


def test_grad_layer_norm():
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.parameter("x", rand(r, (4, 8)))
        gain = g.parameter("gain", rand(r, (8,), 0.5, 1.5))
        bias = g.parameter("bias", rand(r, (8,)))
        y = g.layer_norm(x, gain, bias)
        return g, scalarize(g, y, seed), ["x", "gain", "bias"], None
    check_primitive(build)


def test_grad_mean_pool():
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.parameter("x", rand(r, (3, 5, 2)))
        y = g.mean_pool(x, axis=1)
        return g, scalarize(g, y, seed), ["x"], None
    check_primitive(build)


def test_grad_concat_slice():
    def build(seed):
        r = rng(seed)
        g = Graph()
        a = g.parameter("a", rand(r, (2, 3)))
        b = g.parameter("b", rand(r, (2, 4)))
        y = g.slice(g.concat([a, b], axis=1), axis=1, start=1, stop=6)
        return g, scalarize(g, y, seed), ["a", "b"], None
    check_primitive(build)


def test_grad_losses():
    def build(seed):
        r = rng(seed)
        g = Graph()
        z = g.parameter("z", rand(r, (4, 5), -2, 2))
        onehot = np.eye(5, dtype=np.float32)[r.integers(0, 5, size=4)]
        t = g.parameter("t", onehot, trainable=False)
        ce = g.softmax_cross_entropy(z, t)
        zb = g.parameter("zb", rand(r, (4, 5), -2, 2))
        yb = g.parameter(
            "yb", (r.uniform(size=(4, 5)) < 0.4).astype(np.float32),
            trainable=False)
        bce = g.binary_cross_entropy(zb, yb)
        a = g.parameter("am", rand(r, (3, 3)))
        bm = g.parameter("bm", rand(r, (3, 3)))
        mse = g.mse_loss(a, bm)
        total = g.add(g.add(ce, bce), mse)
        loss = g.output("loss", total)
        return g, loss, ["z", "zb", "am", "bm"], None
    check_primitive(build)


def test_grad_check_two_layer_tanh_network():
    # composed network: x -> tanh(x@w1+b1) -> tanh(.@w2) -> mse vs target
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.input("x", (4, 4))
        w1 = g.parameter("w1", rand(r, (4, 4)))
        b1 = g.parameter("b1", rand(r, (4,)))
        w2 = g.parameter("w2", rand(r, (4, 4)))
        h = g.tanh(g.add(g.matmul(x, w1), b1))
        y = g.tanh(g.matmul(h, w2))
        loss = scalarize(g, y, seed)
        return g, loss, ["w1", "b1", "w2"], {"x": rand(r, (4, 4))}
    check_primitive(build)


def test_grad_check_softmax_ce_head():
    def build(seed):
        r = rng(seed)
        g = Graph()
        x = g.input("x", (3, 4))
        w = g.parameter("w", rand(r, (4, 5)))
        onehot = np.eye(5, dtype=np.float32)[r.integers(0, 5, size=3)]
        t = g.parameter("t", onehot, trainable=False)
        loss = g.output("loss", g.softmax_cross_entropy(g.matmul(x, w), t))
        return g, loss, ["w"], {"x": rand(r, (3, 4))}
    check_primitive(build)


def test_grad_check_constant_graph_is_exact_zero():
    r = rng(7)
    g = Graph()
    w = g.parameter("w", rand(r, (3, 3)))
    a = g.parameter("a", rand(r, (3, 3)), trainable=False)
    b = g.parameter("b", rand(r, (3, 3)), trainable=False)
    loss = g.output("loss", g.mse_loss(a, b))
    assert grad_check(g, loss, "w", 1e-3) == 0.0


def test_grad_check_epsilon_validation():
    g = Graph()
    w = g.parameter("w", np.ones((2,), np.float32))
    loss = g.output("loss", g.mse_loss(w, w))
    with pytest.raises(ValueError):
        grad_check(g, loss, "w", 0.5)


def test_as_tensor_is_contiguous_f32():
    t = as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32 and t.flags.c_contiguous
