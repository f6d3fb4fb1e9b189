import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aagnet import ops
from aagnet.gradcheck import check_gradients, relative_error
from aagnet.tensor import ShapeError, Tensor
from oracles import (layer_norm_two_pass, naive_conv2d, naive_depthwise, naive_matmul,
                     naive_maxpool, softmax_f64)

LAYER_TOL = 1e-4


def T(a, grad=False, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, name=name)


def assert_grads(fn, tensors, tol=LAYER_TOL, **kw):
    errs = check_gradients(fn, tensors, **kw)
    assert max(errs.values()) < tol, errs


# ------------------------------------------------------------------ conv2d


def test_conv_stem_shape():
    x = Tensor(np.zeros((1, 128, 128, 3), dtype=np.float32))
    k = Tensor(np.zeros((3, 3, 3, 32), dtype=np.float32))
    assert ops.conv2d(x, k, stride=2, padding="same").shape == (1, 64, 64, 32)


def test_conv_1x1_identity(rng):
    x = Tensor(rng.standard_normal((2, 5, 5, 4)).astype(np.float32))
    k = Tensor(np.eye(4, dtype=np.float32).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ops.conv2d(x, k).data, x.data)


def test_conv_valid_vs_loop_oracle(rng):
    x = rng.standard_normal((1, 6, 6, 2)).astype(np.float32)
    w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding="valid").data
    ref = naive_conv2d(x, w, 1, "valid")
    assert relative_error(got, ref) < 1e-6


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("hw", [(7, 7), (8, 5)])
def test_conv_same_vs_loop_oracle(stride, hw, rng):
    x = rng.standard_normal((2, *hw, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    got = ops.conv2d(T(x), T(w), stride=stride, padding="same").data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, "same"), rtol=1e-12, atol=1e-12)


def test_conv_bias(rng):
    x, w, b = rng.standard_normal((1, 4, 4, 2)), rng.standard_normal((1, 1, 2, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(ops.conv2d(T(x), T(w), T(b)).data,
                               naive_conv2d(x, w, 1, "same") + b, rtol=1e-12)


def test_conv_errors():
    x = T(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, T(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        ops.conv2d(x, T(np.zeros((3, 3, 2, 1))), stride=0)
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.zeros((1, 0, 4, 2))), T(np.zeros((3, 3, 2, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, T(np.zeros((5, 5, 2, 1))), padding="valid")


@given(n=st.integers(1, 20), k=st.integers(1, 5), s=st.integers(1, 4),
       pad=st.sampled_from(["same", "valid"]))
def test_conv_shape_algebra(n, k, s, pad):
    if pad == "valid" and k > n:
        return
    x = Tensor(np.zeros((1, n, n + 1, 1)))
    w = Tensor(np.zeros((k, k, 1, 2)))
    out = ops.conv2d(x, w, stride=s, padding=pad)
    if pad == "same":
        want = (math.ceil(n / s), math.ceil((n + 1) / s))
    else:
        want = ((n - k) // s + 1, (n + 1 - k) // s + 1)
    assert out.shape == (1, *want, 2)
    dw = ops.depthwise_conv2d(x, Tensor(np.zeros((k, k, 1))), stride=s, padding=pad)
    assert dw.shape == (1, *want, 1)


# --------------------------------------------------------------- depthwise


def test_depthwise_identity_and_shape(rng):
    x = Tensor(rng.standard_normal((1, 8, 8, 4)).astype(np.float32))
    k = np.zeros((3, 3, 4), dtype=np.float32)
    k[1, 1, :] = 1.0
    np.testing.assert_array_equal(ops.depthwise_conv2d(x, Tensor(k)).data, x.data)
    assert ops.depthwise_conv2d(x, Tensor(k), stride=2).shape == (1, 4, 4, 4)


def test_depthwise_vs_loop_oracle(rng):
    x = rng.standard_normal((2, 7, 7, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3)).astype(np.float32)
    for s in (1, 2):
        got = ops.depthwise_conv2d(Tensor(x), Tensor(w), stride=s).data
        assert relative_error(got, naive_depthwise(x, w, s, "same")) < 1e-6


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.depthwise_conv2d(T(np.zeros((1, 4, 4, 2))), T(np.zeros((3, 3, 3))))


# ----------------------------------------------------------------- maxpool


def test_maxpool_constant_and_single_peak():
    c = ops.maxpool2d(T(np.full((1, 4, 4, 2), 3.0)))
    np.testing.assert_array_equal(c.data, np.full((1, 2, 2, 2), 3.0))
    x = np.zeros((1, 4, 4, 1))
    x[0, 3, 2, 0] = 9.0
    out = ops.maxpool2d(T(x)).data[0, :, :, 0]
    np.testing.assert_array_equal(out, [[0, 0], [0, 9]])


def test_maxpool_vs_loop_oracle(rng):
    x = rng.standard_normal((1, 8, 8, 3))
    np.testing.assert_array_equal(ops.maxpool2d(T(x), 2, 2).data, naive_maxpool(x, 2, 2)[0])


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        ops.maxpool2d(T(np.zeros((1, 2, 2, 1))), window=3)
    with pytest.raises(ValueError):
        ops.maxpool2d(T(np.zeros((1, 4, 4, 1))), window=0)


# ------------------------------------------------------------------ softmax


def test_softmax_uniform_and_shift():
    np.testing.assert_allclose(ops.softmax(T(np.zeros((1, 4)))).data, [[0.25] * 4], rtol=1e-15)
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    np.testing.assert_allclose(ops.softmax(T(x + 123.0)).data, ops.softmax(T(x)).data, rtol=1e-12)


def test_softmax_vs_f64_oracle(rng):
    x = rng.standard_normal(4).astype(np.float32)
    got = ops.softmax(Tensor(x[None])).data[0]
    assert relative_error(got, np.array(softmax_f64(x))) < 1e-6


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(row):
    p = ops.softmax(Tensor(np.array([row], dtype=np.float32))).data
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) < 1e-6
    assert (p > 0).all() and (p < 1).all()


def test_softmax_saturated_stays_open():
    p = ops.softmax(Tensor(np.array([[0.0, 200.0]], dtype=np.float32))).data
    assert 0 < p[0, 0] and p[0, 1] < 1


def test_log_softmax_consistent(rng):
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(np.exp(ops.log_softmax(T(x)).data), ops.softmax(T(x)).data, rtol=1e-12)


# --------------------------------------------------------------- layer norm


def test_layer_norm_constant_slice_is_zero():
    out = ops.layer_norm(T(np.full((2, 6), 4.2)), T(np.ones(6)), T(np.zeros(6)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 6)))


def test_layer_norm_moments(rng):
    x = rng.standard_normal((5, 32)).astype(np.float32) * 3 + 7
    out = ops.layer_norm(Tensor(x), Tensor(np.ones(32, np.float32)), Tensor(np.zeros(32, np.float32))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-3


def test_layer_norm_vs_two_pass(rng):
    x, g, b = rng.standard_normal((3, 4, 10)), rng.standard_normal(10), rng.standard_normal(10)
    np.testing.assert_allclose(ops.layer_norm(T(x), T(g), T(b)).data, layer_norm_two_pass(x, g, b),
                               rtol=1e-10, atol=1e-12)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        ops.layer_norm(T(np.zeros((2, 4))), T(np.ones(3)), T(np.zeros(4)))


# ------------------------------------------------------------- elementwise


def test_pointwise_values():
    np.testing.assert_array_equal(ops.relu(T([-1.0, 2.0])).data, [0.0, 2.0])
    assert ops.sigmoid(T([0.0])).data[0] == 0.5
    x = np.array([-3.0, 0.0, 2.0])
    np.testing.assert_allclose(ops.swish(T(x)).data, x / (1 + np.exp(-x)), rtol=1e-15)


def test_gap_128():
    x = np.random.default_rng(0).random((1, 8, 8, 128))
    out = ops.global_avg_pool(T(x))
    assert out.shape == (1, 128)
    np.testing.assert_allclose(out.data[0], x[0].mean(axis=(0, 1)), rtol=1e-14)


def test_dense_vs_naive(rng):
    x, w, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(ops.dense(T(x), T(w), T(b)).data, naive_matmul(x, w) + b, rtol=1e-12)
    with pytest.raises(ShapeError):
        ops.dense(T(x), T(np.zeros((5, 3))))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.add(T(np.zeros(3)), T(np.zeros(4)))
    with pytest.raises(ShapeError):
        ops.mul(T(np.zeros((2, 3))), T(np.zeros(3)))
    with pytest.raises(ShapeError):
        ops.concat([T(np.zeros((2, 3))), T(np.zeros((3, 3)))], axis=-1)
    with pytest.raises(ShapeError):
        ops.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))


def test_dropout_inverted_and_inert(rng):
    x = T(np.ones((200, 50)))
    assert ops.dropout(x, 0.3, None, training=False) is x
    y = ops.dropout(x, 0.3, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.7}
    assert abs(y.mean() - 1.0) < 0.03


def test_cross_entropy_values():
    assert float(ops.sparse_softmax_cross_entropy(T(np.zeros((3, 4))), np.array([0, 1, 3])).data) == \
        pytest.approx(math.log(4), rel=1e-15)
    big = np.array([[60.0, 0, 0, 0]])
    assert float(ops.sparse_softmax_cross_entropy(T(big), np.array([0])).data) < 1e-20
    with pytest.raises(ValueError):
        ops.sparse_softmax_cross_entropy(T(np.zeros((1, 4))), np.array([4]))


def test_cross_entropy_vs_f64(rng):
    x = rng.standard_normal((6, 4)).astype(np.float32)
    y = rng.integers(0, 4, 6)
    got = float(ops.sparse_softmax_cross_entropy(Tensor(x), y).data)
    want = math.fsum(-math.log(softmax_f64(r)[c]) for r, c in zip(x, y)) / 6
    assert got == pytest.approx(want, rel=1e-6)


def test_gated_fusion_properties(rng):
    a, b = rng.standard_normal((50, 8)), rng.standard_normal((50, 8))
    al = rng.random((50, 8))
    f = ops.gated_fusion(T(al), T(a), T(b)).data
    assert (f >= np.minimum(a, b)).all() and (f <= np.maximum(a, b)).all()
    np.testing.assert_array_equal(ops.gated_fusion(T(al), T(a), T(a)).data, a)


# ---------------------------------------------------------- gradient checks


def rand(rng, *shape, name=None):
    return T(rng.standard_normal(shape), grad=True, name=name)


def weighted_sum(out, w):
    return ops.sum(ops.mul(out, Tensor(w)))


OP_CASES = {
    "add_bias": lambda r: ((x := rand(r, 2, 3, name="x")), (b := rand(r, 3, name="b")), lambda: ops.add(x, b)),
    "sub": lambda r: ((x := rand(r, 2, 3, name="x")), (y := rand(r, 2, 3, name="y")), lambda: ops.sub(x, y)),
    "mul": lambda r: ((x := rand(r, 2, 3, name="x")), (y := rand(r, 2, 3, name="y")), lambda: ops.mul(x, y)),
    "matmul": lambda r: ((x := rand(r, 2, 3, 4, name="x")), (y := rand(r, 2, 4, 5, name="y")),
                         lambda: ops.matmul(x, y)),
    "dense": lambda r: ((x := rand(r, 3, 4, name="x")), (w := rand(r, 4, 2, name="w")),
                        (b := rand(r, 2, name="b")), lambda: ops.dense(x, w, b)),
    "relu": lambda r: ((x := rand(r, 4, 5, name="x")), lambda: ops.relu(x)),
    "sigmoid": lambda r: ((x := rand(r, 4, 5, name="x")), lambda: ops.sigmoid(x)),
    "swish": lambda r: ((x := rand(r, 4, 5, name="x")), lambda: ops.swish(x)),
    "mean": lambda r: ((x := rand(r, 3, 4, 5, name="x")), lambda: ops.mean(x, axis=1)),
    "gap": lambda r: ((x := rand(r, 2, 3, 3, 4, name="x")), lambda: ops.global_avg_pool(x)),
    "concat": lambda r: ((x := rand(r, 2, 3, name="x")), (y := rand(r, 2, 2, name="y")),
                         lambda: ops.concat([x, y], axis=-1)),
    "reshape_transpose": lambda r: ((x := rand(r, 2, 6, name="x")),
                                    lambda: ops.transpose(ops.reshape(x, (2, 3, 2)), (2, 0, 1))),
    "softmax": lambda r: ((x := rand(r, 3, 5, name="x")), lambda: ops.softmax(x)),
    "log_softmax": lambda r: ((x := rand(r, 3, 5, name="x")), lambda: ops.log_softmax(x)),
    "layer_norm": lambda r: ((x := rand(r, 3, 6, name="x")), (g := rand(r, 6, name="g")),
                             (b := rand(r, 6, name="b")), lambda: ops.layer_norm(x, g, b)),
    "conv2d_same_s2": lambda r: ((x := rand(r, 2, 5, 5, 2, name="x")), (w := rand(r, 3, 3, 2, 3, name="w")),
                                 (b := rand(r, 3, name="b")), lambda: ops.conv2d(x, w, b, 2, "same")),
    "conv2d_valid": lambda r: ((x := rand(r, 1, 6, 6, 2, name="x")), (w := rand(r, 3, 3, 2, 2, name="w")),
                               lambda: ops.conv2d(x, w, None, 1, "valid")),
    "depthwise": lambda r: ((x := rand(r, 2, 6, 6, 3, name="x")), (w := rand(r, 3, 3, 3, name="w")),
                            (b := rand(r, 3, name="b")), lambda: ops.depthwise_conv2d(x, w, b, 2, "same")),
    "maxpool": lambda r: ((x := rand(r, 2, 6, 6, 2, name="x")), lambda: ops.maxpool2d(x, 2, 2)),
    "gated_fusion": lambda r: ((a := T(r.random((3, 4)) * 0.8 + 0.1, grad=True, name="alpha")),
                               (x := rand(r, 3, 4, name="a")), (y := rand(r, 3, 4, name="b")),
                               lambda: ops.gated_fusion(a, x, y)),
}


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_op_gradients(case):
    r = np.random.default_rng(zlib.crc32(case.encode()))
    *tensors, build = OP_CASES[case](r)
    w = r.standard_normal(build().shape)
    assert_grads(lambda: weighted_sum(build(), w), tensors)


def test_dropout_gradient():
    r = np.random.default_rng(3)
    x = rand(r, 4, 6, name="x")
    w = r.standard_normal((4, 6))
    assert_grads(lambda: weighted_sum(ops.dropout(x, 0.4, np.random.default_rng(9), True), w), [x])


def test_cross_entropy_gradient():
    r = np.random.default_rng(4)
    x = rand(r, 5, 4, name="logits")
    y = r.integers(0, 4, 5)
    assert_grads(lambda: ops.sparse_softmax_cross_entropy(x, y), [x])
