import numpy as np
import pytest

from equant.errors import ShapeMismatchError
from equant.tensors import (
    LINEAR,
    RELU,
    RELU6,
    Activation,
    apply_activation,
    channel_stats,
    conv2d,
    depthwise_conv2d,
    prelu,
)


def naive_conv2d(x, kernel, bias, stride=(1, 1), padding="valid"):
    """Element-loop reference, kept independent of the library implementation."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    sh, sw = stride
    if padding == "same":
        oh = -(-h // sh)
        ow = -(-w // sw)
        ph = max((oh - 1) * sh + kh - h, 0)
        pw = max((ow - 1) * sw + kw - w, 0)
        xp = np.zeros((n, h + ph, w + pw, cin))
        xp[:, ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w, :] = x
        x, h, w = xp, h + ph, w + pw
    else:
        oh = (h - kh) // sh + 1
        ow = (w - kw) // sw + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += x[b, i * sh + di, j * sw + dj, c] * kernel[di, dj, c, o]
                    out[b, i, j, o] = acc + bias[o]
    return out


class TestConv2d:
    def test_scalar_multiply_add(self):
        x = np.array([[[[3.0]]]])
        kernel = np.array([[[[2.0]]]])
        out = conv2d(x, kernel, np.array([1.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 7.0

    def test_identity_kernel(self, rng):
        x = rng.random((2, 5, 5, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        out = conv2d(x, kernel, np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_ones_3x3_valid(self):
        x = np.ones((1, 3, 3, 1))
        kernel = np.ones((3, 3, 1, 1))
        out = conv2d(x, kernel, np.zeros(1), padding="valid")
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    @pytest.mark.parametrize("padding", ["valid", "same"])
    @pytest.mark.parametrize("stride", [(1, 1), (2, 2), (1, 2)])
    def test_matches_naive_loop(self, rng, padding, stride):
        x = rng.normal(size=(2, 6, 7, 3))
        kernel = rng.normal(size=(3, 2, 3, 4))
        bias = rng.normal(size=4)
        got = conv2d(x, kernel, bias, stride, padding)
        want = naive_conv2d(x, kernel, bias, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_linearity_in_kernel_and_bias(self, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        kernel = rng.normal(size=(3, 3, 2, 3))
        bias = rng.normal(size=3)
        for alpha in (0.25, 3.0, 17.5):
            ref = alpha * conv2d(x, kernel, bias)
            got = conv2d(x, alpha * kernel, alpha * bias)
            np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_channel_mismatch_error_names_dimension(self):
        x = np.zeros((1, 4, 4, 3))
        kernel = np.zeros((3, 3, 4, 2))
        with pytest.raises(ShapeMismatchError, match="channels 3 != kernel c_in 4"):
            conv2d(x, kernel, np.zeros(2))

    def test_bias_length_error(self):
        with pytest.raises(ShapeMismatchError, match="bias"):
            conv2d(np.zeros((1, 4, 4, 1)), np.zeros((3, 3, 1, 2)), np.zeros(3))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeMismatchError, match="does not fit"):
            conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1), padding="valid")

    def test_deterministic_across_runs(self, rng):
        x = rng.normal(size=(2, 8, 8, 4))
        kernel = rng.normal(size=(3, 3, 4, 4))
        bias = rng.normal(size=4)
        a = conv2d(x, kernel, bias)
        b = conv2d(x.copy(), kernel.copy(), bias.copy())
        assert np.array_equal(a, b)


class TestDepthwiseConv2d:
    def test_per_channel_scaling(self):
        x = np.ones((1, 1, 1, 2))
        kernel = np.array([2.0, 3.0]).reshape(1, 1, 2)
        out = depthwise_conv2d(x, kernel, np.zeros(2))
        np.testing.assert_array_equal(out[0, 0, 0], [2.0, 3.0])

    def test_zero_kernel_broadcasts_bias(self, rng):
        x = rng.random((1, 4, 4, 3))
        bias = np.array([1.0, -2.0, 0.5])
        out = depthwise_conv2d(x, np.zeros((3, 3, 3)), bias, padding="same")
        for c in range(3):
            np.testing.assert_array_equal(out[..., c], np.full((1, 4, 4), bias[c]))

    def test_equals_per_channel_conv2d(self, rng):
        x = rng.random((1, 4, 4, 3))
        kernel = rng.normal(size=(3, 3, 3))
        bias = rng.normal(size=3)
        got = depthwise_conv2d(x, kernel, bias, padding="valid")
        for c in range(3):
            single = conv2d(
                x[..., c : c + 1], kernel[:, :, c].reshape(3, 3, 1, 1),
                bias[c : c + 1], padding="valid",
            )
            np.testing.assert_allclose(got[..., c], single[..., 0], rtol=1e-12)

    def test_trailing_multiplier_axis_accepted(self, rng):
        x = rng.random((1, 4, 4, 2))
        kernel = rng.normal(size=(3, 3, 2))
        a = depthwise_conv2d(x, kernel, np.zeros(2), padding="same")
        b = depthwise_conv2d(x, kernel[..., None], np.zeros(2), padding="same")
        np.testing.assert_array_equal(a, b)

    def test_channel_independence(self, rng):
        x = rng.random((1, 5, 5, 4))
        kernel = rng.normal(size=(3, 3, 4))
        base = depthwise_conv2d(x, kernel, np.zeros(4), padding="same")
        bumped = x.copy()
        bumped[..., 2] += 1.0
        out = depthwise_conv2d(bumped, kernel, np.zeros(4), padding="same")
        for c in range(4):
            if c == 2:
                assert not np.allclose(out[..., c], base[..., c])
            else:
                np.testing.assert_array_equal(out[..., c], base[..., c])

    def test_channel_mismatch_error(self):
        with pytest.raises(ShapeMismatchError, match="channels"):
            depthwise_conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2)), np.zeros(2))

    def test_multiplier_above_one_rejected(self):
        with pytest.raises(ShapeMismatchError, match="multiplier"):
            depthwise_conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 2, 2)), np.zeros(2))


class TestActivations:
    def test_relu(self):
        out = apply_activation(np.array([[-1.0, 0.0, 2.0]]), RELU)
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_relu6_clamps_at_six(self):
        assert apply_activation(np.array([7.5]), RELU6)[0] == 6.0
        np.testing.assert_array_equal(
            apply_activation(np.array([-1.0, 3.0, 6.0, 100.0]), RELU6), [0.0, 3.0, 6.0, 6.0]
        )

    def test_prelu_definition(self):
        act = prelu(0.25)
        assert apply_activation(np.array([-4.0]), act)[0] == -1.0
        assert apply_activation(np.array([4.0]), act)[0] == 4.0

    def test_prelu_per_channel(self):
        act = prelu([0.5, 0.1])
        out = apply_activation(np.array([[-2.0, -2.0]]), act)
        np.testing.assert_allclose(out, [[-1.0, -0.2]])

    def test_prelu_slope_count_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="slope count"):
            apply_activation(np.zeros((1, 3)), prelu([0.5, 0.1]))

    def test_negative_prelu_slope_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            prelu(-0.1)

    def test_linear_passthrough(self, rng):
        x = rng.normal(size=(2, 3))
        assert apply_activation(x, LINEAR) is x

    @pytest.mark.parametrize(
        "act", [LINEAR, RELU, prelu(0.3), prelu([0.1, 0.9, 0.0])], ids=str
    )
    def test_positive_homogeneity_exact(self, rng, act):
        x = rng.normal(size=(4, 3)) * 10
        for alpha in (0.125, 0.5, 2.0, 8.0):  # powers of two: exact in floats
            lhs = apply_activation(alpha * x, act)
            rhs = alpha * apply_activation(x, act)
            np.testing.assert_array_equal(lhs, rhs)

    def test_relu6_breaks_homogeneity(self):
        x = np.array([4.0])
        alpha = 2.0
        lhs = apply_activation(alpha * x, RELU6)  # clamps to 6
        rhs = alpha * apply_activation(x, RELU6)  # 8
        assert lhs[0] == 6.0 and rhs[0] == 8.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown activation"):
            Activation("sigmoid")


class TestChannelStats:
    def test_single_channel(self):
        st = channel_stats(np.array([-1.0, 2.0]).reshape(1, 1, 2, 1))
        assert st.min[0] == -1.0 and st.max[0] == 2.0 and st.energy[0] == 5.0

    def test_all_zero_channel(self):
        st = channel_stats(np.zeros((1, 2, 2, 1)))
        assert st.min[0] == 0.0 and st.max[0] == 0.0 and st.energy[0] == 0.0

    def test_matches_naive_loop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        st = channel_stats(x)
        for c in range(5):
            vals = [
                x[b, i, j, c] for b in range(2) for i in range(3) for j in range(4)
            ]
            assert st.min[c] == min(vals)
            assert st.max[c] == max(vals)
            assert st.energy[c] == pytest.approx(sum(v * v for v in vals), rel=1e-12)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ShapeMismatchError, match="empty"):
            channel_stats(np.zeros((0, 2, 2, 1)))
