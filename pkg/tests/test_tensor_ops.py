"""Forward-pass contracts of the tensor ops against naive loop oracles."""

import numpy as np
import pytest

from branchnet.tensor import (ShapeError, Tensor, batch_norm2d, conv2d,
                              global_avg_pool, linear, pool2d, relu,
                              residual_add, softmax)

from oracles import batchnorm_twopass, conv2d_loops, linear_loops, pool2d_loops


class TestConv2d:
    def test_scalar_product(self):
        out = conv2d(Tensor([[[[3.0]]]]), Tensor([[[[2.0]]]]))
        assert out.data.reshape(()) == 6.0

    def test_all_ones_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        assert conv2d(x, w).data.reshape(()) == 9.0

    def test_matches_loop_oracle_strided_padded(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, stride=2, pad=1),
                                   rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_loop_oracle_random_shapes(self, rng, stride, pad):
        for _ in range(4):
            n, cin, cout = rng.integers(1, 4, size=3)
            kh, kw = rng.integers(1, 4, size=2)
            h = int(rng.integers(kh, 8))
            w = int(rng.integers(kw, 8))
            x = rng.standard_normal((n, cin, h, w))
            wt = rng.standard_normal((cout, cin, kh, kw))
            b = rng.standard_normal(cout)
            got = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=int(stride), pad=int(pad))
            want = conv2d_loops(x, wt, b, stride=int(stride), pad=int(pad))
            np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)

    def test_output_spatial_formula(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 9, 7)))
        w = Tensor(rng.standard_normal((2, 1, 3, 3)))
        out = conv2d(x, w, stride=2, pad=1)
        assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_names_dimension(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="Cin"):
            conv2d(x, w)

    def test_kernel_larger_than_padded_input(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="kernel"):
            conv2d(x, w)


class TestBatchNorm:
    def _stats(self, c):
        return Tensor(np.zeros(c)), Tensor(np.ones(c))

    def test_constant_input_maps_to_zero(self):
        x = Tensor(np.full((2, 3, 2, 2), 7.0))
        rm, rv = self._stats(3)
        out = batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv,
                           mode="train", epsilon=1e-5)
        assert np.all(np.abs(out.data) <= 1e-5)

    def test_normalization_contract_mean_and_variance(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3.0 + 1.5)
        rm, rv = self._stats(3)
        out = batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.full(3, 5.0)), rm, rv,
                           mode="train", epsilon=1e-12)
        means = out.data.mean(axis=(0, 2, 3))
        variances = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 5.0, rtol=0, atol=1e-9)
        np.testing.assert_allclose(variances, 1.0, rtol=0, atol=1e-6)

    def test_matches_two_pass_oracle(self, rng):
        x = rng.standard_normal((4, 3, 2, 2))
        gamma = rng.standard_normal(3)
        beta = rng.standard_normal(3)
        rm, rv = self._stats(3)
        out = batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                           mode="train", epsilon=1e-5)
        np.testing.assert_allclose(out.data, batchnorm_twopass(x, gamma, beta, 1e-5),
                                   rtol=0, atol=1e-12)

    def test_running_stats_update_rule(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        rm = Tensor(np.array([1.0, -1.0]))
        rv = Tensor(np.array([2.0, 0.5]))
        batch_mean = x.mean(axis=(0, 2, 3))
        batch_var = x.var(axis=(0, 2, 3))
        batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                     mode="train", momentum=0.9)
        np.testing.assert_allclose(rm.data, 0.9 * np.array([1.0, -1.0]) + 0.1 * batch_mean)
        np.testing.assert_allclose(rv.data, 0.9 * np.array([2.0, 0.5]) + 0.1 * batch_var)

    def test_eval_mode_uses_running_stats_only(self, rng):
        x = rng.standard_normal((2, 2, 2, 2))
        rm = Tensor(np.array([0.5, -0.5]))
        rv = Tensor(np.array([4.0, 0.25]))
        out = batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           rm, rv, mode="eval", epsilon=0.0)
        want = (x - np.array([0.5, -0.5])[None, :, None, None]) \
            / np.sqrt(np.array([4.0, 0.25]))[None, :, None, None]
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(rm.data, [0.5, -0.5])  # unchanged

    def test_single_element_train_mode_rejected(self):
        x = Tensor(np.ones((1, 3, 1, 1)))
        rm, rv = self._stats(3)
        with pytest.raises(ValueError, match="degenerate"):
            batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, mode="train")


class TestRelu:
    def test_basic(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_idempotent(self, rng):
        x = Tensor(rng.standard_normal(50))
        np.testing.assert_array_equal(relu(relu(x)).data, relu(x).data)


class TestPool2d:
    def test_max_window2(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert pool2d(x, "max", window=2).data.reshape(()) == 4.0

    def test_avg_window2(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert pool2d(x, "avg", window=2).data.reshape(()) == 2.5

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_matches_loop_oracle(self, rng, kind):
        x = rng.standard_normal((1, 1, 6, 6))
        got = pool2d(Tensor(x), kind, window=2, stride=2)
        np.testing.assert_allclose(got.data, pool2d_loops(x, kind, 2, 2),
                                   rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_matches_loop_oracle_overlapping(self, rng, kind):
        for _ in range(5):
            h, w = rng.integers(3, 8, size=2)
            window = int(rng.integers(2, min(h, w) + 1))
            stride = int(rng.integers(1, window + 1))
            x = rng.standard_normal((2, 3, h, w))
            got = pool2d(Tensor(x), kind, window=window, stride=stride)
            np.testing.assert_allclose(got.data, pool2d_loops(x, kind, window, stride),
                                       rtol=0, atol=1e-15)

    def test_oversized_window_rejected(self):
        with pytest.raises(ShapeError, match="window"):
            pool2d(Tensor(np.ones((1, 1, 2, 2))), "max", window=3)


class TestGlobalAvgPool:
    def test_constant_map(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 7.0)))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 7.0))

    def test_small_case(self):
        out = global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])))
        assert out.data.reshape(()) == 4.0

    def test_equals_full_window_avg_pool(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        got = global_avg_pool(Tensor(x))
        want = pool2d(Tensor(x), "avg", window=5, stride=1)
        np.testing.assert_allclose(got.data, want.data.reshape(2, 4), rtol=0, atol=1e-15)


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((3, 4))
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self, rng):
        b = rng.standard_normal(5)
        out = linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (2, 5)))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        got = linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(got.data, linear_loops(x, w, b), rtol=0, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="D="):
            linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(4)))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_array_equal(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 7))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = softmax(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_rows_sum_to_one_with_magnitude_1e3(self, rng):
        x = rng.uniform(-1e3, 1e3, size=(16, 9))
        out = softmax(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert np.all(out.data >= 0)  # extreme gaps underflow to exactly 0

    def test_rows_positive_for_moderate_logits(self, rng):
        out = softmax(Tensor(rng.uniform(-20, 20, size=(8, 6))))
        assert np.all(out.data > 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            softmax(Tensor([[np.inf, 0.0]]))


class TestResidualAdd:
    def test_additive_identity(self, rng):
        x = rng.standard_normal((2, 3))
        out = residual_add(Tensor(x), Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_commutative(self, rng):
        a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
        np.testing.assert_array_equal(residual_add(Tensor(a), Tensor(b)).data,
                                      residual_add(Tensor(b), Tensor(a)).data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="mismatch"):
            residual_add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
