import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dglearn.tensor import (AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, LrSchedule, MaxPool2d,
                            NonFiniteError, Parameter, ReLU, Sequential, ShapeError, cross_entropy,
                            gradient_check, layer_forward, sgd_step, zero_grad)


def conv_oracle(x, w, b):
    """Direct nested-loop convolution with zero padding k//2."""
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((bsz, o, h, wd))
    for n in range(bsz):
        for f in range(o):
            for i in range(h):
                for j in range(wd):
                    out[n, f, i, j] = np.sum(xp[n, :, i:i + k, j:j + k] * w[f]) + b[f]
    return out


def scalar_check(layer, x, seed=0):
    """Gradient check of sum(out * r) w.r.t. layer parameters and input."""
    r = np.random.default_rng(seed).normal(size=layer_forward(x, layer).shape)
    xp = Parameter(x.copy())

    def fb():
        zero_grad(layer.params() + [xp])
        out = layer.forward(xp.value, train=True)
        xp.grad += layer.backward(r)
        return float((out * r).sum())

    return gradient_check(fb, layer.params() + [xp])


class TestLayerForward:
    def test_identity_1x1_convolution(self):
        conv = Conv2d(1, 1, 1)
        conv.weight.value[...] = 1.0
        conv.bias.value[...] = 0.0
        out = layer_forward(np.ones((1, 1, 4, 4), np.float32), conv)
        np.testing.assert_array_equal(out, np.ones((1, 1, 4, 4)))

    def test_maxpool_shape(self):
        out = layer_forward(np.arange(16.0).reshape(1, 1, 4, 4), MaxPool2d(2))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_conv_matches_nested_loop_oracle(self, rng):
        conv = Conv2d(3, 4, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(2, 3, 8, 8))
        expected = conv_oracle(x, conv.weight.value, conv.bias.value)
        np.testing.assert_allclose(layer_forward(x, conv), expected, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_names_layer_and_extents(self):
        conv = Conv2d(3, 4, 3, name="block2.conv")
        with pytest.raises(ShapeError, match=r"block2\.conv.*C=3.*\(5, 8, 8\)"):
            layer_forward(np.zeros((1, 5, 8, 8), np.float32), conv)

    def test_odd_pool_extent_rejected(self):
        with pytest.raises(ShapeError, match="maxpool"):
            layer_forward(np.zeros((1, 1, 5, 5)), MaxPool2d(2))

    def test_deterministic_given_seed(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        a = Conv2d(3, 4, rng=np.random.default_rng(7))
        b = Conv2d(3, 4, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(layer_forward(x, a), layer_forward(x, b))

    def test_avgpool_to_target(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = layer_forward(x, AvgPool2d(2))
        np.testing.assert_allclose(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_batchnorm_train_normalizes_and_eval_uses_running_stats(self, rng):
        bn = BatchNorm2d(2, dtype=np.float64)
        x = rng.normal(loc=3.0, scale=2.0, size=(16, 2, 4, 4))
        out = bn.forward(x, train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
        mean = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(bn.running_mean, 0.1 * mean)
        ev = bn.forward(x, train=False)
        expected = (x - bn.running_mean[None, :, None, None]) / np.sqrt(
            bn.running_var[None, :, None, None] + bn.eps)
        np.testing.assert_allclose(ev, expected)

    def test_outputs_finite(self, rng):
        net = Sequential([Conv2d(3, 4, rng=rng), BatchNorm2d(4), ReLU(), MaxPool2d(2), Flatten(),
                          Dense(64, 3, rng=rng)])
        out = net.forward(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))
        assert out.dtype == np.float32 and np.isfinite(out).all()


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((5, 10)), np.arange(5))
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_large_margin_is_near_zero(self):
        logits = np.zeros((3, 4))
        labels = np.array([0, 2, 3])
        logits[np.arange(3), labels] = 50.0
        loss, _ = cross_entropy(logits, labels)
        assert 0 <= loss < 1e-20

    def test_gradient_float32_vs_central_differences(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 1, 2, 1])
        _, g32 = cross_entropy(logits.astype(np.float32), labels)
        assert g32.dtype == np.float32
        fd = np.zeros_like(logits)
        h = 1e-6
        for idx in np.ndindex(*logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (cross_entropy(up, labels)[0] - cross_entropy(down, labels)[0]) / (2 * h)
        assert np.linalg.norm(g32 - fd) / np.linalg.norm(fd) < 1e-4

    @pytest.mark.parametrize("bad", [-1, 3])
    def test_out_of_range_label(self, bad):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(np.zeros((2, 3)), np.array([0, bad]))

    @given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_loss_non_negative(self, b, c, seed):
        r = np.random.default_rng(seed)
        loss, g = cross_entropy(r.normal(scale=5, size=(b, c)), r.integers(0, c, size=b))
        assert loss >= 0
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


class TestSgdStep:
    def test_single_plain_step(self):
        p = Parameter(np.array([1.0]))
        p.grad[...] = 0.5
        sgd_step([p], lr=0.1)
        assert p.value[0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = Parameter(np.array([1.0, -2.0]))
        sgd_step([p], lr=0.3, momentum=0.9, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_quadratic_recursion(self):
        p = Parameter(np.array([1.0]))
        for _ in range(5):
            p.grad[...] = p.value  # f = theta^2 / 2
            sgd_step([p], lr=0.1)
        assert p.value[0] == pytest.approx(0.9 ** 5, abs=1e-15)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-4, 1.0))
    def test_plain_mode_is_bit_exact(self, v, g, lr):
        p = Parameter(np.array([v]))
        p.grad[...] = g
        sgd_step([p], lr=lr)
        assert p.value[0] == np.float64(v) - np.float64(lr) * np.float64(g)

    def test_momentum_and_weight_decay(self):
        p = Parameter(np.array([2.0]))
        p.grad[...] = 1.0
        sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.5)
        # buffer = 0 + (1 + 0.5 * 2) = 2
        assert p.momentum_buffer[0] == pytest.approx(2.0)
        assert p.value[0] == pytest.approx(1.8)
        p.grad[...] = 1.0
        sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.5)
        # buffer = 0.9 * 2 + (1 + 0.5 * 1.8) = 3.7
        assert p.momentum_buffer[0] == pytest.approx(3.7)
        assert p.value[0] == pytest.approx(1.8 - 0.37)

    @pytest.mark.parametrize("lr", [0.0, -0.1])
    def test_rejects_non_positive_rate(self, lr):
        with pytest.raises(ValueError):
            sgd_step([Parameter(np.zeros(1))], lr=lr)


class TestLrSchedule:
    def test_decay_points(self):
        s = LrSchedule(0.1, 0.2, 15)
        assert s.rate(0) == s.rate(14) == pytest.approx(0.1)
        assert s.rate(15) == pytest.approx(0.02)
        assert s.rate(30) == pytest.approx(0.004)

    @given(st.floats(1e-3, 1.0), st.floats(0.01, 1.0), st.integers(1, 20))
    def test_non_increasing_piecewise_constant(self, base, factor, period):
        s = LrSchedule(base, factor, period)
        rates = [s.rate(e) for e in range(5 * period)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        for e in range(5 * period):
            assert rates[e] == rates[(e // period) * period]

    @pytest.mark.parametrize("args", [(0.0, 0.2, 15), (0.1, 0.0, 15), (0.1, 1.5, 15), (0.1, 0.2, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            LrSchedule(*args)


class TestGradientCheck:
    def test_single_dense_layer(self, rng):
        layer = Dense(5, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(4, 5))
        y = np.array([0, 1, 2, 0])

        def fb():
            zero_grad(layer.params())
            loss, g = cross_entropy(layer.forward(x), y)
            layer.backward(g)
            return loss

        assert gradient_check(fb, layer.params()) < 1e-6

    def test_zero_parameter_model(self):
        assert gradient_check(lambda: 1.0, []) == 0.0

    def test_non_finite_loss_fails(self):
        p = Parameter(np.zeros(2))
        with pytest.raises(NonFiniteError):
            gradient_check(lambda: float("nan"), [p])

    def test_requires_64_bit(self):
        with pytest.raises(TypeError):
            gradient_check(lambda: 0.0, [Parameter(np.zeros(2, np.float32))])

    def test_detects_wrong_gradient(self):
        p = Parameter(np.array([1.0, 2.0]))

        def fb():
            p.grad[...] = 3 * p.value  # true gradient of sum(v^2) is 2v
            return float((p.value ** 2).sum())

        assert gradient_check(fb, [p]) > 0.1


SHAPES = st.tuples(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 4]))


class TestBackwardProperties:
    @given(SHAPES, st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 1000))
    def test_conv(self, shape, out_c, k, seed):
        b, c, n = shape
        r = np.random.default_rng(seed)
        assert scalar_check(Conv2d(c, out_c, k, rng=r, dtype=np.float64),
                            r.normal(size=(b, c, n, n)), seed) < 1e-5

    @given(SHAPES, st.integers(0, 1000))
    def test_batchnorm(self, shape, seed):
        b, c, n = shape
        r = np.random.default_rng(seed)
        bn = BatchNorm2d(c, dtype=np.float64)
        bn.scale.value[...] = r.uniform(0.5, 2, size=c)
        bn.shift.value[...] = r.normal(size=c)
        assert scalar_check(bn, r.normal(size=(b + 1, c, n, n)), seed) < 1e-5

    @given(SHAPES, st.integers(0, 1000))
    def test_pooling_and_relu(self, shape, seed):
        b, c, n = shape
        r = np.random.default_rng(seed)
        x = r.normal(size=(b, c, n, n))
        for layer in (MaxPool2d(2), AvgPool2d(1), AvgPool2d(2), ReLU(), Flatten()):
            assert scalar_check(layer, x, seed) < 1e-5

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
    def test_dense(self, b, i, o, seed):
        r = np.random.default_rng(seed)
        assert scalar_check(Dense(i, o, rng=r, dtype=np.float64), r.normal(size=(b, i)), seed) < 1e-5
