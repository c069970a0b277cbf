"""Tensor core: op semantics, gradients vs finite differences, determinism."""

import numpy as np
import pytest

from splinecnn import tensor as T
from splinecnn.tensor import DTensor

from conftest import finite_difference, rel_err

TOL = 1e-4


def _grad_check(build_loss, x0, eps=1e-5, tol=TOL):
    """build_loss maps a numpy array to a scalar DTensor; checks d/dx."""
    x = DTensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    loss = build_loss(x)
    T.backward(loss)
    fd = finite_difference(lambda v: float(build_loss(DTensor(v)).values), x0, eps)
    assert rel_err(x.grad, fd) <= tol


class TestMatmul:
    def test_identity(self):
        a = DTensor(np.eye(2))
        b = DTensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).values, b.values)

    def test_small_product(self):
        y = T.matmul(DTensor([[1.0, 2.0]]), DTensor([[3.0], [4.0]]))
        assert y.values.tolist() == [[11.0]]

    def test_gradient(self, rng):
        a0 = rng.standard_normal((3, 4))
        b = DTensor(rng.standard_normal((4, 2)))
        _grad_check(lambda a: T.sum_(T.square(T.matmul(a, b))), a0)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(DTensor(np.ones((2, 3))), DTensor(np.ones((2, 3))))


def _conv_naive(x, f, stride=1, padding="same"):
    """Six-nested-loop cross-correlation oracle."""
    n, h, w, c = x.shape
    kh, kw, _, fo = f.shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
    out = np.zeros((n, oh, ow, fo))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for di in range(kh):
                    for dj in range(kw):
                        for ch in range(c):
                            out[b, i, j] += x[b, i * stride + di, j * stride + dj, ch] * f[di, dj, ch]
    return out


class TestConv2d:
    def test_all_ones_valid(self):
        x = DTensor(np.ones((1, 3, 3, 1)))
        f = DTensor(np.ones((3, 3, 1, 1)))
        y = T.conv2d(x, f, padding="valid")
        assert y.shape == (1, 1, 1, 1)
        assert y.values.item() == 9.0

    def test_impulse_reproduces_filter(self, rng):
        x = np.zeros((1, 7, 7, 1))
        x[0, 3, 3, 0] = 1.0
        f = rng.standard_normal((3, 3, 1, 1))
        y = T.conv2d(DTensor(x), DTensor(f), padding="same")
        # cross-correlation of a delta reproduces the filter flipped
        np.testing.assert_allclose(y.values[0, 2:5, 2:5, 0], f[::-1, ::-1, 0, 0],
                                   atol=1e-12)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_oracle(self, rng, padding, stride):
        x = rng.standard_normal((2, 8, 8, 3))
        f = rng.standard_normal((5, 5, 3, 4))
        y = T.conv2d(DTensor(x), DTensor(f), stride=stride, padding=padding)
        np.testing.assert_allclose(y.values, _conv_naive(x, f, stride, padding), atol=1e-6)

    def test_gradients(self, rng):
        x0 = rng.standard_normal((2, 5, 5, 2))
        f0 = rng.standard_normal((3, 3, 2, 3))
        _grad_check(lambda x: T.sum_(T.square(T.conv2d(x, DTensor(f0)))), x0)
        _grad_check(lambda f: T.sum_(T.square(T.conv2d(DTensor(x0), f))), f0)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(DTensor(np.ones((1, 4, 4, 2))), DTensor(np.ones((3, 3, 3, 1))))


class TestSigmoidSlope:
    def test_zero_is_half(self):
        assert T.sigmoid_slope(DTensor([0.0]), 7.3).values[0] == 0.5

    def test_saturation(self):
        assert T.sigmoid_slope(DTensor([1e4]), 1.0).values[0] == pytest.approx(1.0)
        assert T.sigmoid_slope(DTensor([-1e4]), 1.0).values[0] == pytest.approx(0.0)

    def test_reference_value(self):
        y = T.sigmoid_slope(DTensor([1.0]), 0.4).values[0]
        assert y == pytest.approx(1.0 / (1.0 + np.exp(-0.4)), abs=1e-12)

    def test_gradient(self, rng):
        _grad_check(lambda x: T.sum_(T.sigmoid_slope(x, 0.4)), rng.standard_normal(6))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(DTensor(np.zeros((3, 10))), np.array([1, 5, 9]))
        assert float(loss.values) == pytest.approx(np.log(10), abs=1e-9)

    def test_confident_correct(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 1e3
        loss = T.softmax_cross_entropy(DTensor(logits), np.array([3]))
        assert float(loss.values) == pytest.approx(0.0, abs=1e-9)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits0 = rng.standard_normal((4, 10))
        labels = rng.integers(0, 10, size=4)
        x = DTensor(logits0, requires_grad=True)
        T.backward(T.softmax_cross_entropy(x, labels))
        ez = np.exp(logits0 - logits0.max(axis=1, keepdims=True))
        probs = ez / ez.sum(axis=1, keepdims=True)
        onehot = np.eye(10)[labels]
        np.testing.assert_allclose(x.grad, (probs - onehot) / 4, atol=1e-10)
        fd = finite_difference(
            lambda v: float(T.softmax_cross_entropy(DTensor(v), labels).values), logits0)
        assert rel_err(x.grad, fd) <= TOL

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(DTensor(np.zeros((1, 3))), np.array([3]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = DTensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = DTensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward(T.sum_(T.square(x)))
        np.testing.assert_allclose(x.grad, 2 * x.values)

    def test_grad_accumulates_over_reuse(self):
        x = DTensor([2.0], requires_grad=True)
        T.backward(T.sum_(T.add(T.mul(x, 3.0), T.mul(x, 4.0))))
        assert x.grad[0] == pytest.approx(7.0)

    def test_nonscalar_root_rejected(self):
        x = DTensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(T.mul(x, 2.0))


class TestSgdMomentum:
    def test_plain_step(self):
        p = DTensor([0.0], requires_grad=True)
        p.grad = np.array([1.0])
        T.sgd_momentum_step([p], {}, lr=1.0, momentum=0.0)
        assert p.values[0] == -1.0

    def test_velocity_decays_geometrically(self):
        p = DTensor([0.0], requires_grad=True)
        vel = {}
        p.grad = np.array([1.0])
        T.sgd_momentum_step([p], vel, lr=0.0, momentum=0.9)
        p.grad = np.array([0.0])
        for _ in range(3):
            T.sgd_momentum_step([p], vel, lr=0.0, momentum=0.9)
        assert vel[id(p)][0] == pytest.approx(0.9 ** 3)

    def test_two_step_recurrence(self):
        # v1 = 1, p = -0.1; v2 = 0.9 + 1 = 1.9, p = -0.1 - 0.19 = -0.29
        p = DTensor([0.0], requires_grad=True)
        vel = {}
        for _ in range(2):
            p.grad = np.array([1.0])
            T.sgd_momentum_step([p], vel, lr=0.1, momentum=0.9)
        assert p.values[0] == pytest.approx(-0.29)


class TestPrimitiveGradients:
    """Finite-difference coverage of the remaining differentiable primitives."""

    def test_elementwise(self, rng):
        x0 = rng.standard_normal((3, 4))
        other = DTensor(rng.standard_normal((3, 4)))
        _grad_check(lambda x: T.sum_(T.mul(T.add(x, other), other)), x0)
        _grad_check(lambda x: T.sum_(T.div(x, T.add(T.square(other), 1.0))), x0)
        _grad_check(lambda x: T.sum_(T.square(T.neg(x))), x0)

    def test_relu(self, rng):
        x0 = rng.standard_normal(20) + 0.01  # keep clear of the kink
        _grad_check(lambda x: T.sum_(T.square(T.relu(x))), x0)

    def test_exp_log_pow(self, rng):
        x0 = rng.random(8) + 0.5
        _grad_check(lambda x: T.sum_(T.exp(x)), x0)
        _grad_check(lambda x: T.sum_(T.log(x)), x0)
        _grad_check(lambda x: T.sum_(T.pow_base(2.0, x)), x0)

    def test_maxpool(self, rng):
        x0 = rng.standard_normal((2, 4, 4, 3))
        _grad_check(lambda x: T.sum_(T.square(T.maxpool2x2(x))), x0)

    def test_global_avg_pool(self, rng):
        x0 = rng.standard_normal((2, 4, 4, 3))
        _grad_check(lambda x: T.sum_(T.square(T.global_avg_pool(x))), x0)

    def test_reshape_concat_stack(self, rng):
        x0 = rng.standard_normal((2, 6))
        _grad_check(lambda x: T.sum_(T.square(T.reshape(x, (3, 4)))), x0)
        _grad_check(lambda x: T.sum_(T.square(T.concat([x, x], axis=1))), x0)
        _grad_check(lambda x: T.sum_(T.square(T.stack([x, T.mul(x, 2.0)], axis=0))), x0)

    def test_transpose_mean(self, rng):
        x0 = rng.standard_normal((3, 5))
        _grad_check(lambda x: T.sum_(T.square(T.transpose(x, (1, 0)))), x0)
        _grad_check(lambda x: T.sum_(T.square(T.mean(x, axis=1))), x0)

    def test_weighted_sum(self, rng):
        x0 = rng.standard_normal((2, 3))
        other = DTensor(rng.standard_normal((2, 3)))
        _grad_check(
            lambda x: T.sum_(T.square(T.weighted_sum([x, other], [0.3, 0.7]))), x0)

    def test_clamp_interior(self, rng):
        x0 = rng.standard_normal(10) * 0.1 + 0.5  # strictly inside (0, 1)
        _grad_check(lambda x: T.sum_(T.square(T.clamp(x, 0.0, 1.0))), x0)

    def test_dropout_train_eval(self, rng):
        x = DTensor(np.ones((4, 4)), requires_grad=True)
        assert T.dropout(x, 0.5, rng, train=False) is x
        y = T.dropout(x, 0.5, np.random.default_rng(1), train=True)
        kept = y.values != 0
        np.testing.assert_allclose(y.values[kept], 2.0)  # inverted scaling


class TestDeterminism:
    def test_forward_and_grad_bitwise_identical(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            x = DTensor(rng.standard_normal((2, 6, 6, 2)), requires_grad=True)
            f = DTensor(rng.standard_normal((3, 3, 2, 4)), requires_grad=True)
            loss = T.sum_(T.square(T.conv2d(x, f)))
            T.backward(loss)
            results.append((loss.values.copy(), x.grad.copy(), f.grad.copy()))
        for a, b in zip(results[0], results[1]):
            assert np.array_equal(a, b)
