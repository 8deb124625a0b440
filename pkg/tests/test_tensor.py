"""Engine-level tests: forward values, gradients, graph behavior."""

import numpy as np
import pytest

from terravec import ops
from terravec.gradcheck import finite_difference_check
from terravec.tensor import (
    ShapeError,
    Tensor,
    clip,
    concat,
    matmul,
    pad2d,
    roll,
    take,
)


def test_matmul_identity():
    b = Tensor(np.arange(12, dtype=float).reshape(3, 4))
    eye = Tensor(np.eye(3))
    assert np.array_equal((eye @ b).data, b.data)


def test_matmul_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [1.0]])
    assert np.array_equal((a @ b).data, [[2.0], [4.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_grad_of_sum_is_ones_times_bt():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)))
    (a @ b).sum().backward()
    expected = np.ones((3, 5)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_softmax_symmetry_and_single_element():
    y = ops.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-15)
    single = ops.softmax(Tensor([[4.2]]), axis=1)
    assert single.data[0, 0] == 1.0


def test_softmax_matches_exp_normalize():
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    y = ops.softmax(Tensor(x), axis=0)
    np.testing.assert_allclose(y.data, direct, atol=1e-12)


def test_softmax_slices_sum_to_one_and_positive():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = Tensor(rng.standard_normal((4, 6)) * 10)
        y = ops.softmax(x, axis=1)
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-9)
        assert (y.data > 0).all()


def test_depthwise_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 5, 5)))
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1.0
    out = ops.depthwise_conv3x3(x, Tensor(k))
    np.testing.assert_array_equal(out.data, x.data)


def test_depthwise_constant_interior():
    k = np.arange(9, dtype=float).reshape(1, 3, 3)
    x = Tensor(np.full((1, 6, 6), 3.0))
    out = ops.depthwise_conv3x3(x, Tensor(k))
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 3.0 * k.sum(), atol=1e-12)


def test_depthwise_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 4, 4))
    k = rng.standard_normal((1, 3, 3))
    expected = np.zeros_like(x)
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for di in range(3):
                for dj in range(3):
                    ii, jj = i + di - 1, j + dj - 1
                    if 0 <= ii < 4 and 0 <= jj < 4:
                        acc += x[0, ii, jj] * k[0, di, dj]
            expected[0, i, j] = acc
    out = ops.depthwise_conv3x3(Tensor(x), Tensor(k))
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.depthwise_conv3x3(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 3, 3))))


def test_conv1x1_bn_relu_clamps_negatives():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 3)))
    w = Tensor(-np.eye(2) * 50.0)
    gamma, beta = Tensor(np.ones(2)), Tensor(np.full(2, -100.0))
    out = ops.conv1x1_bn_relu(x, w, gamma, beta)
    assert (out.data == 0).all()


def test_batchnorm_zero_mean_before_affine():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 4, 4)) * 7 + 2)
    normed = ops.spatial_batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(normed.data.mean(axis=(1, 2)), 0.0, atol=1e-9)


def test_conv1x1_bn_relu_matches_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 2))
    w = rng.standard_normal((3, 2))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    pre = np.einsum("oc,chw->ohw", w, x)
    mu = pre.mean(axis=(1, 2), keepdims=True)
    var = pre.var(axis=(1, 2), keepdims=True)
    expected = np.maximum(
        gamma[:, None, None] * (pre - mu) / np.sqrt(var + 1e-5) + beta[:, None, None],
        0.0,
    )
    out = ops.conv1x1_bn_relu(Tensor(x), Tensor(w), Tensor(gamma), Tensor(beta),
                              bias=Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_bilinear_resize_identity_and_constant():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((3, 5, 7)))
    same = ops.bilinear_resize(x, 5, 7)
    np.testing.assert_array_equal(same.data, x.data)
    const = ops.bilinear_resize(Tensor(np.full((1, 4, 4), 5.0)), 9, 3)
    np.testing.assert_allclose(const.data, 5.0, atol=1e-12)


def test_bilinear_resize_center_value():
    x = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = ops.bilinear_resize(x, 3, 3)
    assert out.data[0, 1, 1] == pytest.approx(1.5, abs=1e-12)


def test_bilinear_sample_constant_and_nodes():
    field = Tensor(np.full((4, 4), 2.5))
    pts = Tensor(np.array([[0.3, 1.7], [3.9, -2.0], [2.0, 2.0]]))
    out = ops.bilinear_sample(field, pts)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-12)

    grid = Tensor(np.arange(16, dtype=float).reshape(4, 4))
    nodes = Tensor(np.array([[1.0, 2.0], [3.0, 0.0]]))
    out = ops.bilinear_sample(grid, nodes)
    np.testing.assert_array_equal(out.data, [6.0, 12.0])


def test_bilinear_sample_cell_center():
    field = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]))
    out = ops.bilinear_sample(field, Tensor(np.array([[0.5, 0.5]])))
    assert out.data[0] == pytest.approx(4.0, abs=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_gives_2x():
    x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_backward_accumulates_until_reset():
    x = Tensor(np.ones(4), requires_grad=True)
    loss = (x * 3.0).sum()
    loss.backward()
    loss2 = (x * 3.0).sum()
    loss2.backward()
    np.testing.assert_array_equal(x.grad, np.full(4, 6.0))
    x.zero_grad()
    assert x.grad is None


def test_backward_composite_matches_finite_differences():
    rng = np.random.default_rng(9)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

    def fn(a, b):
        return ops.softmax(a @ b, axis=1).sum() + (ops.softmax(a @ b, axis=0) ** 2.0).sum()

    assert finite_difference_check(fn, [a, b]) < 1e-4


def test_backward_deterministic_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        loss = (ops.softmax(x @ w, axis=1) * x).sum()
        loss.backward()
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_structural_ops_roundtrip():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    padded = pad2d(x, 1, 2, 0, 1)
    assert padded.shape == (2, 6, 5)
    np.testing.assert_array_equal(padded.data[:, 1:4, 0:4], x.data)

    rolled = roll(x, 1, axis=2)
    np.testing.assert_array_equal(rolled.data[..., 0], x.data[..., -1])

    taken = take(x, [2, 0], axis=1)
    np.testing.assert_array_equal(taken.data[:, 0], x.data[:, 2])

    both = concat([x, x], axis=0)
    assert both.shape == (4, 3, 4)

    clipped = clip(Tensor([-2.0, 0.5, 2.0]), -1.0, 1.0)
    np.testing.assert_array_equal(clipped.data, [-1.0, 0.5, 1.0])


def test_dropout_identity_at_inference():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3)))
    rng = np.random.default_rng(1)
    assert ops.dropout(x, 0.6, rng, training=False) is x
    y = ops.dropout(x, 0.6, np.random.default_rng(2), training=True)
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], x.data[kept] / 0.4, rtol=1e-12)


def test_unused_branch_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    (x * 2.0).sum().backward()
    assert y.grad is None


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_core_sample(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
    wt = Tensor(rng.standard_normal((3, 2, 2)))

    def fn(x, w):
        return (ops.conv2d_3x3(x, w, stride=2) * wt).sum()

    assert finite_difference_check(fn, [x, w]) < 1e-4
