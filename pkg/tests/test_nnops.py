import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smilenet import nnops
from smilenet.errors import ShapeError
from smilenet.nnops import ConvParams, DenseParams

from tests.oracles import conv_loop, dense_loop, numeric_grad, rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- conv


def test_conv_hand_sum():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    p = ConvParams(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), np.zeros(1))
    np.testing.assert_array_equal(nnops.conv2d_valid(x, p), [[[5.0]]])


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 7))
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(nnops.conv2d_valid(x, p), x)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 6, 6))
    p = ConvParams(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))
    np.testing.assert_allclose(nnops.conv2d_valid(x, p), conv_loop(x, p.kernels, p.bias),
                               rtol=0, atol=1e-12)


def test_conv_batch_equals_per_sample(rng):
    x = rng.normal(size=(3, 2, 7, 6))
    p = ConvParams(rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4))
    batched = nnops.conv2d_valid(x, p)
    for b in range(3):
        np.testing.assert_allclose(batched[b], nnops.conv2d_valid(x[b], p), atol=1e-12)


@pytest.mark.parametrize("shape, msg", [((2, 6, 6), "channels"), ((1, 2, 6), "height"),
                                        ((1, 6, 2), "width")])
def test_conv_shape_errors_name_dimension(shape, msg):
    p = ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError, match=msg):
        nnops.conv2d_valid(np.zeros(shape), p)


def test_conv_output_shape(rng):
    x = rng.normal(size=(1, 69, 85))
    p = ConvParams(rng.normal(size=(32, 1, 5, 5)), np.zeros(32))
    assert nnops.conv2d_valid(x, p).shape == (32, 65, 81)


def test_conv_backward_linear_case(rng):
    x = rng.normal(size=(1, 4, 5))
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    gx, gp = nnops.conv2d_backward(x, p, np.ones((1, 4, 5)))
    np.testing.assert_array_equal(gx, np.ones_like(x))
    assert gp.kernels[0, 0, 0, 0] == pytest.approx(x.sum(), abs=1e-12)


def test_conv_bias_grad_is_spatial_sum(rng):
    x = rng.normal(size=(2, 6, 6))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    g = rng.normal(size=(3, 4, 4))
    _, gp = nnops.conv2d_backward(x, p, g)
    np.testing.assert_allclose(gp.bias, g.sum(axis=(1, 2)), atol=1e-12)


def test_conv_backward_rejects_wrong_grad_shape():
    p = ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        nnops.conv2d_backward(np.zeros((1, 5, 5)), p, np.zeros((1, 2, 2)))


def test_conv_backward_finite_differences(rng):
    x = rng.normal(size=(2, 6, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    g = rng.normal(size=(3, 4, 3))
    f = lambda: float(np.sum(g * nnops.conv2d_valid(x, p)))
    gx, gp = nnops.conv2d_backward(x, p, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gp.kernels, numeric_grad(f, p.kernels)) < 1e-4
    assert rel_error(gp.bias, numeric_grad(f, p.bias)) < 1e-4


# ---------------------------------------------------------------- pool


def test_pool_basic():
    out, idx = nnops.maxpool2x2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(out, [[[4.0]]])
    assert divmod(int(idx.flat[0, 0, 0]), 2) == (1, 1)


def test_pool_discards_odd_trailing_row_and_column():
    x = np.arange(9, dtype=float).reshape(1, 3, 3)[:, ::-1, ::-1].copy()  # max sits at (0, 0)
    out, _ = nnops.maxpool2x2_forward(x)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == max(x[0, 0, 0], x[0, 0, 1], x[0, 1, 0], x[0, 1, 1])


def test_pool_ties_pick_lowest_index():
    out, idx = nnops.maxpool2x2_forward(np.ones((1, 2, 2)))
    assert idx.flat[0, 0, 0] == 0


def test_pool_rejects_small_input():
    with pytest.raises(ShapeError):
        nnops.maxpool2x2_forward(np.zeros((1, 1, 4)))


def test_pool_backward_routes_to_argmax():
    _, idx = nnops.maxpool2x2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(nnops.maxpool2x2_backward(np.array([[[7.0]]]), idx),
                                  [[[0.0, 0.0], [0.0, 7.0]]])


def test_pool_backward_zeros(rng):
    x = rng.normal(size=(2, 5, 7))
    out, idx = nnops.maxpool2x2_forward(x)
    g = nnops.maxpool2x2_backward(np.zeros_like(out), idx)
    assert g.shape == x.shape and not g.any()


def test_pool_backward_discarded_cells_get_zero(rng):
    x = rng.normal(size=(1, 5, 5))
    out, idx = nnops.maxpool2x2_forward(x)
    g = nnops.maxpool2x2_backward(np.ones_like(out), idx)
    assert not g[:, 4, :].any() and not g[:, :, 4].any()


def test_pool_backward_finite_differences(rng):
    # a permutation keeps every window free of ties
    x = rng.permutation(2 * 6 * 7).reshape(2, 6, 7).astype(float) * 0.1
    out, idx = nnops.maxpool2x2_forward(x)
    g = rng.normal(size=out.shape)
    f = lambda: float(np.sum(g * nnops.maxpool2x2_forward(x)[0]))
    assert rel_error(nnops.maxpool2x2_backward(g, idx), numeric_grad(f, x)) < 1e-4


@given(arrays(np.float64, (2, 5, 6), elements=st.floats(-1e3, 1e3)), st.floats(-1e3, 1e3))
def test_pool_shift_equivariance(x, c):
    out, idx = nnops.maxpool2x2_forward(x)
    out_c, idx_c = nnops.maxpool2x2_forward(x + c)
    np.testing.assert_allclose(out_c, out + c, atol=1e-9)
    # shifting can merge near-ties through rounding; compare positions only where the max is unique
    blocks = x[:, :4, :6].reshape(2, 2, 2, 3, 2).transpose(0, 1, 3, 2, 4).reshape(2, 2, 3, 4)
    srt = np.sort(blocks, axis=-1)
    unique = srt[..., -1] - srt[..., -2] > 1e-6
    np.testing.assert_array_equal(idx.flat[unique], idx_c.flat[unique])


# ---------------------------------------------------------------- dense


def test_dense_hand_case():
    p = DenseParams(np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
    np.testing.assert_array_equal(nnops.dense_forward(np.array([1.0, 2.0]), p), [3.0, -1.0])


def test_dense_identity(rng):
    x = rng.normal(size=5)
    np.testing.assert_array_equal(nnops.dense_forward(x, DenseParams(np.eye(5), np.zeros(5))), x)


def test_dense_matches_loop_oracle(rng):
    x = rng.normal(size=7)
    p = DenseParams(rng.normal(size=(4, 7)), rng.normal(size=4))
    np.testing.assert_allclose(nnops.dense_forward(x, p), dense_loop(x, p.weights, p.bias), atol=1e-12)


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        nnops.dense_forward(np.zeros(3), DenseParams(np.zeros((2, 4)), np.zeros(2)))


def test_dense_backward_onehot_gives_row(rng):
    p = DenseParams(rng.normal(size=(3, 4)), np.zeros(3))
    gx, _ = nnops.dense_backward(rng.normal(size=4), p, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(gx, p.weights[0])


def test_dense_backward_outer_product():
    p = DenseParams(np.zeros((2, 2)), np.zeros(2))
    _, gp = nnops.dense_backward(np.array([1.0, 2.0]), p, np.array([3.0, 4.0]))
    np.testing.assert_array_equal(gp.weights, [[3.0, 6.0], [4.0, 8.0]])
    np.testing.assert_array_equal(gp.bias, [3.0, 4.0])


def test_dense_backward_finite_differences(rng):
    x = rng.normal(size=(3, 6))
    p = DenseParams(rng.normal(size=(4, 6)), rng.normal(size=4))
    g = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(g * nnops.dense_forward(x, p)))
    gx, gp = nnops.dense_backward(x, p, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gp.weights, numeric_grad(f, p.weights)) < 1e-4
    assert rel_error(gp.bias, numeric_grad(f, p.bias)) < 1e-4


# ---------------------------------------------------------------- relu / softmax / loss


def test_relu_values_and_idempotence():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nnops.relu(x), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(nnops.relu(nnops.relu(x)), nnops.relu(x))


def test_relu_backward():
    np.testing.assert_array_equal(
        nnops.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0.0, 5.0])
    assert nnops.relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0.0


def test_softmax_cases():
    np.testing.assert_allclose(nnops.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(nnops.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], atol=1e-15)
    np.testing.assert_array_equal(nnops.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    p = nnops.softmax(x)
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all((p > 0) & (p <= 1))
    np.testing.assert_allclose(nnops.softmax(x + c), p, rtol=0, atol=1e-12)


def test_cross_entropy_cases():
    assert nnops.cross_entropy(np.array([0.5, 0.5]), 1) == pytest.approx(math.log(2), abs=1e-12)
    assert nnops.cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    assert nnops.cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
    np.testing.assert_allclose(
        nnops.cross_entropy_logit_grad(nnops.softmax(np.zeros(2)), 1), [0.5, -0.5])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        nnops.cross_entropy(np.array([0.5, 0.5]), 2)


def test_softmax_cross_entropy_finite_differences(rng):
    for _ in range(5):
        logits = rng.normal(size=4)
        label = int(rng.integers(4))
        f = lambda: float(nnops.cross_entropy(nnops.softmax(logits), label))
        analytic = nnops.cross_entropy_logit_grad(nnops.softmax(logits), label)
        assert rel_error(analytic, numeric_grad(f, logits)) < 1e-4


# ---------------------------------------------------------------- dropout


def test_dropout_rate_zero_is_identity(rng):
    x = rng.normal(size=(3, 4))
    out, mask = nnops.dropout_forward(x, 0.0, rng)
    np.testing.assert_array_equal(out, x)
    assert np.all(mask == 1.0)
    g = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(nnops.dropout_backward(g, mask), g)


def test_dropout_inverted_scaling(rng):
    out, mask = nnops.dropout_forward(np.full(1000, 3.0), 0.5, rng)
    assert set(np.unique(out)) == {0.0, 6.0}


def test_dropout_rejects_rate_one(rng):
    with pytest.raises(ValueError):
        nnops.dropout_forward(np.ones(3), 1.0, rng)


def test_dropout_monte_carlo_expectation():
    rng = np.random.default_rng(7)
    x = np.array([0.5, 1.0, 2.0, -3.0])
    total = np.zeros_like(x)
    trials = 100_000
    for _ in range(10):
        out, _ = nnops.dropout_forward(np.broadcast_to(x, (trials // 10, 4)), 0.5, rng)
        total += out.sum(axis=0)
    mean = total / trials
    np.testing.assert_array_less(np.abs(mean - x), 0.01 * np.abs(x))


def test_dropout_backward_uses_mask(rng):
    x = rng.normal(size=50)
    out, mask = nnops.dropout_forward(x, 0.3, rng)
    g = rng.normal(size=50)
    np.testing.assert_array_equal(nnops.dropout_backward(g, mask), g * mask)
