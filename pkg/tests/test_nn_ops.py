import numpy as np
import pytest

from gradcases import OP_CASES, tiny_unet_case
from voxelseg.errors import IndivisibleShape, ShapeMismatch
from voxelseg.nn import ops
from voxelseg.nn.gradcheck import grad_check
from voxelseg.nn.tensor import Tape, Tensor


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_double_precision_grad_check(name):
    worst = 0.0
    for seed in range(20):
        fn, inputs, h = OP_CASES[name](seed)
        worst = max(worst, grad_check(fn, inputs, h=h))
    assert worst < 1e-6, f"{name}: max relative error {worst:.3e}"


def test_conv_single_precision_grad_check():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 4, 4, 4, 2)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 3, 2, 2)).astype(np.float32), requires_grad=True)
    probe = rng.normal(size=(1, 4, 4, 4, 2))
    err = grad_check(lambda x, w: ops.weighted_sum(ops.conv3d(x, w), probe), [x, w], h=1e-3,
                     numeric_dtype=np.float64)
    assert err < 1e-4


def test_tiny_unet_double_precision():
    fn, inputs = tiny_unet_case(0)
    assert grad_check(fn, inputs, h=1e-5, max_coords=12) < 1e-6


def test_grad_check_linear_and_guard():
    x = Tensor(np.arange(6.0).reshape(1, 1, 1, 2, 3), requires_grad=True)
    w = np.linspace(-1, 1, 6).reshape(x.shape)
    assert grad_check(lambda x: ops.weighted_sum(x, w), [x], h=1e-3) < 1e-8
    with pytest.raises(ValueError):
        grad_check(lambda x: ops.weighted_sum(x, w), [x], h=0.0)


def test_conv_examples():
    ones = Tensor(np.ones((1, 3, 3, 3, 1)))
    out = ops.conv3d(ones, Tensor(np.ones((3, 3, 3, 1, 1)))).data[0, ..., 0]
    assert out[1, 1, 1] == 27 and out[0, 0, 0] == 8
    delta = np.zeros((3, 3, 3, 2, 2))
    delta[1, 1, 1] = np.eye(2)
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 3, 2))
    np.testing.assert_array_equal(ops.conv3d(Tensor(x), Tensor(delta)).data, x)
    with pytest.raises(ShapeMismatch):
        ops.conv3d(Tensor(x), Tensor(np.ones((2, 2, 2, 2, 2))))
    with pytest.raises(ShapeMismatch):
        ops.conv3d(Tensor(x), Tensor(np.ones((3, 3, 3, 3, 2))))


def test_transposed_conv_examples():
    out = ops.transposed_conv3d(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.ones((2, 2, 2, 1, 1)))).data
    assert out.shape == (1, 2, 2, 2, 1) and np.all(out == 2.5)
    z = ops.transposed_conv3d(Tensor(np.zeros((1, 2, 3, 1, 2))), Tensor(np.ones((2, 2, 2, 3, 2)))).data
    assert z.shape == (1, 4, 6, 2, 3) and not z.any()


def test_transposed_conv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 2, 2, 3, 2))  # (.., c_out=3, c_in=2) for the transpose
    x = rng.normal(size=(1, 2, 3, 2, 2))
    y = rng.normal(size=(1, 4, 6, 4, 3))
    up = ops.transposed_conv3d(Tensor(x), Tensor(w)).data
    # the matching stride-2 2x2x2 "valid" convolution, by explicit loops
    down = np.zeros_like(x)
    for i in range(2):
        for j in range(3):
            for k in range(2):
                blk = y[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
                down[0, i, j, k] = np.einsum("abcO,abcOI->I", blk, w)
    assert abs((up * y).sum() - (x * down).sum()) < 1e-10


def test_maxpool_examples():
    x = np.arange(1, 9, dtype=np.float64).reshape(1, 2, 2, 2, 1)
    assert ops.maxpool3d(Tensor(x)).data.item() == 8
    c = Tensor(np.ones((1, 2, 2, 2, 1)), requires_grad=True)
    with Tape() as tape:
        out = ops.total(ops.maxpool3d(c))
    tape.backward(out)
    g = c.grad.reshape(-1)
    assert g[0] == 1 and g[1:].sum() == 0
    with pytest.raises(IndivisibleShape):
        ops.maxpool3d(Tensor(np.ones((1, 3, 2, 2, 1))))


def test_batchnorm_examples():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(3, 2, (2, 4, 4, 2, 3)))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2, 3)), 1, atol=1e-3)
    n = x.data.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 1, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 1, 2, 3)) * n / (n - 1))
    inf = ops.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), False).data
    np.testing.assert_allclose(inf, x.data / np.sqrt(1 + 1e-5))


def test_relu_softmax_concat_examples():
    r = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 1, 3))).data.ravel()
    np.testing.assert_array_equal(r, [0, 0, 2])
    s = ops.softmax_channels(Tensor(np.zeros((1, 1, 1, 1, 4)))).data.ravel()
    np.testing.assert_array_equal(s, [0.25] * 4)
    big = ops.softmax_channels(Tensor(np.random.default_rng(0).normal(scale=50, size=(2, 3, 3, 3, 4)))).data
    np.testing.assert_allclose(big.sum(-1), 1, atol=1e-6)
    assert np.all(big >= 0) and np.all(big <= 1)
    a = Tensor(np.random.default_rng(1).normal(size=(1, 2, 2, 2, 32)), requires_grad=True)
    b = Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 2, 32)), requires_grad=True)
    g = np.random.default_rng(3).normal(size=(1, 2, 2, 2, 64))
    with Tape() as tape:
        cat = ops.concat_channels(a, b)
    assert cat.shape[-1] == 64
    np.testing.assert_array_equal(cat.data[..., :32], a.data)
    tape.backward(cat, g)
    assert np.isclose(np.sum(a.grad ** 2) + np.sum(b.grad ** 2), np.sum(g ** 2))
    with pytest.raises(ShapeMismatch):
        ops.concat_channels(Tensor(np.ones((1, 2, 2, 2, 1))), Tensor(np.ones((1, 2, 2, 1, 1))))
