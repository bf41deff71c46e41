import math

import numpy as np
import pytest

import dtpn.kernels as kernels
from dtpn.errors import ValidationError
from dtpn.kernels import _reference
from dtpn.tensor import (
    Conv1D,
    Grad2,
    binary_cross_entropy,
    concat_channels,
    concat_channels_backward,
    cross_entropy_rows,
    grad_check,
    maxpool1d,
    maxpool1d_backward,
    sigmoid,
    smooth_l1,
    softmax_rows,
)
from dtpn.verification import run_gradient_checks

try:
    from dtpn.kernels import _speedups
except ImportError:
    _speedups = None

BACKENDS = [pytest.param(_reference, id="numpy")]
if _speedups is not None:
    BACKENDS.append(pytest.param(_speedups, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    impl = request.param
    for name in ("conv1d_forward", "conv1d_backward",
                 "maxpool1d_forward", "maxpool1d_backward"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return impl


class TestConv1D:
    def test_identity_kernel(self, backend, rng):
        conv = Conv1D(1, 3, 3, stride=1, padding="same")
        conv.w[:] = np.eye(3)[None]
        conv.b[:] = 0
        x = Grad2(rng.standard_normal((4, 3)).astype(np.float32))
        assert np.allclose(conv.forward(x).values, x.values, atol=1e-6)

    def test_same_padding_output_length(self, backend, rng):
        conv = Conv1D(3, 2, 4, stride=2, padding="same")
        x = Grad2(rng.standard_normal((16, 2)).astype(np.float32))
        assert conv.forward(x).shape == (8, 4)

    def test_hand_convolution_with_zero_pads(self, backend):
        conv = Conv1D(3, 1, 1, stride=1, padding="same")
        conv.w[:] = 1.0
        conv.b[:] = 0.0
        y = conv.forward(Grad2(np.ones((3, 1), np.float32)))
        assert np.allclose(y.values.ravel(), [2.0, 3.0, 2.0])

    def test_channel_mismatch_raises(self, backend, rng):
        conv = Conv1D(3, 5, 2)
        with pytest.raises(ValidationError, match="channels"):
            conv.forward(Grad2(rng.standard_normal((4, 3)).astype(np.float32)))

    def test_output_length_formulas_random_sweep(self, backend, rng):
        for _ in range(100):
            t = int(rng.integers(1, 40))
            k = int(rng.integers(1, 8))
            stride = int(rng.integers(1, 5))
            x = Grad2(rng.standard_normal((t, 2)).astype(np.float32))
            same = Conv1D(k, 2, 3, stride=stride, padding="same")
            assert same.forward(x).shape[0] == math.ceil(t / stride)
            if t >= k:
                valid = Conv1D(k, 2, 3, stride=stride, padding="valid")
                assert valid.forward(x).shape[0] == (t - k) // stride + 1

    def test_backward_accumulates(self, backend, rng):
        conv = Conv1D(3, 2, 2, stride=1, padding="same")
        x = Grad2(rng.standard_normal((6, 2)).astype(np.float32))
        y = conv.forward(x)
        y.grad[:] = 1.0
        conv.backward(x, y)
        first = x.grad.copy()
        conv.backward(x, y)
        assert np.allclose(x.grad, 2 * first)


class TestMaxPool:
    def test_window_max(self, backend):
        x = Grad2(np.array([[1.0], [5.0], [2.0], [4.0]], np.float32))
        y, _ = maxpool1d(x, 2, 2)
        assert y.values.ravel().tolist() == [5.0, 4.0]

    def test_window_one_is_identity(self, backend, rng):
        x = Grad2(rng.standard_normal((5, 3)).astype(np.float32))
        y, _ = maxpool1d(x, 1, 1)
        assert np.array_equal(y.values, x.values)

    def test_global_reduction(self, backend, rng):
        x = Grad2(rng.standard_normal((16, 4)).astype(np.float32))
        y, _ = maxpool1d(x, 16, 16)
        assert y.shape == (1, 4)
        assert np.array_equal(y.values[0], x.values.max(axis=0))

    def test_pooled_equals_window_max(self, backend, rng):
        x = Grad2(rng.standard_normal((13, 5)).astype(np.float32))
        y, _ = maxpool1d(x, 3, 3)
        for t in range(y.shape[0]):
            window = x.values[3 * t : 3 * (t + 1)]
            assert np.array_equal(y.values[t], window.max(axis=0))

    def test_tie_routes_gradient_to_earliest(self, backend):
        x = Grad2(np.array([[2.0], [2.0], [1.0], [2.0]], np.float32))
        y, argmax = maxpool1d(x, 4, 4)
        assert argmax.ravel().tolist() == [0]
        y.grad[:] = 1.0
        maxpool1d_backward(x, y, argmax)
        assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


class TestConcat:
    def test_five_way_width(self, rng):
        xs = [Grad2(rng.standard_normal((16, 64)).astype(np.float32)) for _ in range(5)]
        assert concat_channels(xs).shape == (16, 320)

    def test_paper_scale_width(self, rng):
        xs = [Grad2(np.zeros((16, 2048), np.float32)) for _ in range(5)]
        assert concat_channels(xs).shape == (16, 10240)

    def test_single_input_identity(self, rng):
        x = Grad2(rng.standard_normal((4, 3)).astype(np.float32))
        assert np.array_equal(concat_channels([x]).values, x.values)

    def test_unequal_time_raises(self, rng):
        xs = [Grad2(np.zeros((4, 2), np.float32)), Grad2(np.zeros((5, 2), np.float32))]
        with pytest.raises(ValidationError, match="equal time"):
            concat_channels(xs)

    def test_backward_splits_by_channel_range(self, rng):
        xs = [Grad2(rng.standard_normal((3, c)).astype(np.float32)) for c in (2, 4)]
        y = concat_channels(xs)
        y.grad[:] = rng.standard_normal(y.shape).astype(np.float32)
        concat_channels_backward(xs, y)
        assert np.array_equal(xs[0].grad, y.grad[:, :2])
        assert np.array_equal(xs[1].grad, y.grad[:, 2:])


class TestPointwiseAndLosses:
    def test_softmax_uniform_on_equal_logits(self):
        probs = softmax_rows(np.zeros((1, 3)))
        assert np.allclose(probs, 1 / 3)

    def test_softmax_rows_sum_to_one(self, rng):
        logits = 50 * rng.standard_normal((40, 7))
        sums = softmax_rows(logits).sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_sigmoid_extremes_are_stable(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert out.tolist() == [0.0, 0.5, 1.0]

    def test_smooth_l1_zero_at_coincidence(self, rng):
        target = rng.standard_normal((3, 2))
        value, grad = smooth_l1(target.copy(), target)
        assert value == 0.0 and np.allclose(grad, 0.0)

    def test_smooth_l1_linear_regime(self):
        value, grad = smooth_l1(np.array([2.0]), np.array([0.0]))
        assert value == pytest.approx(1.5)
        assert grad.tolist() == [1.0]

    def test_smooth_l1_sums_over_coordinates(self):
        value, _ = smooth_l1(np.array([[2.0, 0.5]]), np.zeros((1, 2)))
        assert value == pytest.approx(1.5 + 0.125)

    def test_cross_entropy_nonnegative_and_saturates(self, rng):
        logits = rng.standard_normal((20, 4))
        losses, _ = cross_entropy_rows(logits, rng.integers(0, 4, 20))
        assert np.all(losses >= 0)
        one_hot = np.array([[40.0, 0.0, 0.0, 0.0]])
        near_zero, _ = cross_entropy_rows(one_hot, np.array([0]))
        assert near_zero[0] < 1e-12
        wrong, _ = cross_entropy_rows(one_hot, np.array([2]))
        assert wrong[0] > 1.0

    def test_bce_matches_closed_form_at_zero(self):
        losses, grads = binary_cross_entropy(np.zeros(3), np.array([0.0, 1.0, 0.0]))
        assert np.allclose(losses, math.log(2))
        assert np.allclose(grads, [0.5, -0.5, 0.5])


class TestGradCheck:
    def test_linear_function_is_exact(self, rng):
        a = rng.standard_normal(10)

        def f(theta):
            return float(a @ theta), a

        assert grad_check(f, rng.standard_normal(10)) < 1e-6

    def test_conv_relu_sum_network(self, rng):
        # conv -> relu -> sum, checked with respect to input and parameters
        conv = Conv1D(3, 2, 3, stride=1, padding="same",
                      rng=np.random.default_rng(3), dtype=np.float64)
        x0 = rng.standard_normal((8, 2)) + 0.3
        theta0 = np.concatenate([x0.ravel(), conv.w.ravel(), conv.b.ravel()])

        from dtpn.tensor import relu, relu_backward

        def f(theta):
            x = Grad2(theta[:16].reshape(8, 2).copy())
            conv.w = theta[16 : 16 + conv.w.size].reshape(conv.w.shape).copy()
            conv.b = theta[16 + conv.w.size :].copy()
            conv.w_grad = np.zeros_like(conv.w)
            conv.b_grad = np.zeros_like(conv.b)
            z = conv.forward(x)
            y = relu(z)
            y.grad[:] = 1.0
            relu_backward(z, y)
            conv.backward(x, z)
            grad = np.concatenate(
                [x.grad.ravel(), conv.w_grad.ravel(), conv.b_grad.ravel()]
            )
            return float(y.values.sum()), grad

        assert grad_check(f, theta0, eps=1e-3) < 1e-3

    def test_suite_passes_for_every_kernel(self):
        results = run_gradient_checks()
        failures = [r for r in results if not r.passed]
        assert not failures, failures

    def test_injected_sign_error_is_caught(self, monkeypatch):
        true_backward = kernels.conv1d_backward

        def flipped(x, w, stride, pad_left, pad_right, gy):
            gx, gw, gb = true_backward(x, w, stride, pad_left, pad_right, gy)
            return gx, -gw, gb

        monkeypatch.setattr(kernels, "conv1d_backward", flipped)
        results = run_gradient_checks()
        failing = {r.name for r in results if not r.passed}
        assert any(name.startswith("conv1d") for name in failing)


class TestBackendParity:
    @pytest.mark.skipif(_speedups is None, reason="compiled kernels not built")
    def test_conv_forward_backward_agree(self, rng):
        for dtype, atol in ((np.float32, 1e-4), (np.float64, 1e-10)):
            for t, k, stride, pl, pr in [(16, 3, 2, 1, 1), (7, 2, 1, 0, 1), (64, 17, 16, 8, 9)]:
                x = rng.standard_normal((t, 5)).astype(dtype)
                w = rng.standard_normal((k, 5, 4)).astype(dtype)
                b = rng.standard_normal(4).astype(dtype)
                y_np = _reference.conv1d_forward(x, w, b, stride, pl, pr)
                y_cy = _speedups.conv1d_forward(x, w, b, stride, pl, pr)
                assert np.allclose(y_np, y_cy, atol=atol)
                gy = rng.standard_normal(y_np.shape).astype(dtype)
                for g_np, g_cy in zip(
                    _reference.conv1d_backward(x, w, stride, pl, pr, gy),
                    _speedups.conv1d_backward(x, w, stride, pl, pr, gy),
                ):
                    assert np.allclose(g_np, g_cy, atol=atol)

    @pytest.mark.skipif(_speedups is None, reason="compiled kernels not built")
    def test_maxpool_agrees_exactly(self, rng):
        for t, window, stride in [(16, 2, 2), (9, 4, 4), (5, 1, 1), (16, 16, 16)]:
            x = rng.standard_normal((t, 6)).astype(np.float32)
            y_np, a_np = _reference.maxpool1d_forward(x, window, stride)
            y_cy, a_cy = _speedups.maxpool1d_forward(x, window, stride)
            assert np.array_equal(y_np, y_cy)
            assert np.array_equal(a_np, a_cy)
            gy = rng.standard_normal(y_np.shape).astype(np.float32)
            assert np.array_equal(
                _reference.maxpool1d_backward(a_np, t, gy),
                _speedups.maxpool1d_backward(a_cy, t, gy),
            )
