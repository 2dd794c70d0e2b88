import numpy as np
import pytest

from minisal.tensor import (ShapeError, Tensor, concat_channels, conv2d,
                            deconv2d, maxpool2, mse_normalized, relu,
                            resize_area, tensor_sum)

from gradcheck import fd_gradcheck
from oracles import (area_resize_mean, conv2d_loops, deconv2d_scatter,
                     maxpool2_scan)


def t(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=rg)


class TestConv2d:
    def test_all_ones_center(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 3, 3)))
        out = conv2d(x, k, t([0.0]), stride=1, padding="same")
        assert out.data[0, 0, 1, 1] == 9.0

    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = t(rng.random((2, 1, 5, 5)))
        k = t(np.ones((1, 1, 1, 1)))
        out = conv2d(x, k, t([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = conv2d(t(x), t(k), t(b), stride=1, padding=0)
        ref = conv2d_loops(x, k, b, stride=1, pad=0)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_strided_padded_vs_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d(t(x), t(k), t(b), stride=stride, padding=pad)
        ref = conv2d_loops(x, k, b, stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_same_padding_preserves_extent(self):
        out = conv2d(t(np.zeros((1, 2, 9, 11))), t(np.zeros((5, 2, 3, 3))),
                     t(np.zeros(5)))
        assert out.shape == (1, 5, 9, 11)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), t([0.0]))

    def test_zero_size_output_raises(self):
        with pytest.raises(ShapeError):
            conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))),
                   t([0.0]), padding=0)


class TestMaxpool2:
    def test_single_window(self):
        out = maxpool2(t([[[[1, 2], [3, 4]]]]))
        assert out.data.tolist() == [[[[4.0]]]]

    def test_constant_halves_extents(self):
        out = maxpool2(t(np.full((1, 2, 8, 6), 3.5)))
        assert out.shape == (1, 2, 4, 3)
        assert (out.data == 3.5).all()

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(maxpool2(t(x)).data, maxpool2_scan(x))

    def test_odd_extents_padded(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
        out = maxpool2(t(x))
        assert out.shape == (2, 1, 3, 4)
        np.testing.assert_array_equal(out.data, maxpool2_scan(x))

    def test_backward_first_occurrence_ties(self):
        x = t([[[[1, 1], [1, 1]]]], rg=True)
        tensor_sum(maxpool2(x)).backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


class TestRelu:
    def test_sign_cases(self):
        assert relu(t([-1, 0, 2])).data.tolist() == [0, 0, 2]

    def test_identity_region(self):
        x = t([[1.5, 2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(relu(x).data, x.data)

    def test_indicator_gradient(self):
        x = t([-1.0, 2.0], rg=True)
        tensor_sum(relu(x)).backward()
        assert x.grad.tolist() == [0.0, 1.0]


class TestDeconv2d:
    def test_single_pixel_scatter(self):
        x = t(np.ones((1, 1, 1, 1)))
        k = t(np.ones((1, 1, 4, 4)))
        out = deconv2d(x, k, t([0.0]))
        ref = deconv2d_scatter(np.ones((1, 1, 1, 1)), np.ones((1, 1, 4, 4)),
                               np.zeros(1))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(4)
        k = t(rng.standard_normal((3, 2, 4, 4)))
        out = deconv2d(t(np.zeros((1, 3, 4, 4))), k, t([1.0, -2.0]))
        assert out.shape == (1, 2, 8, 8)
        np.testing.assert_array_equal(out.data[0, 0], np.full((8, 8), 1.0))
        np.testing.assert_array_equal(out.data[0, 1], np.full((8, 8), -2.0))

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
        k = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        out = deconv2d(t(x), t(k), t(b))
        np.testing.assert_allclose(out.data, deconv2d_scatter(x, k, b), atol=1e-5)

    def test_adjoint_of_strided_conv(self):
        # <conv(x), y> == <x, deconv(y)> with the same kernel array
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        y = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        cx = conv2d(t(x), t(k), t(np.zeros(2)), stride=2, padding=1)
        dy = deconv2d(t(y), t(k), t(np.zeros(3)))
        lhs = float(np.sum(cx.data.astype(np.float64) * y))
        rhs = float(np.sum(x.astype(np.float64) * dy.data))
        assert abs(lhs - rhs) < 1e-4


class TestConcat:
    def test_definition(self):
        a, b = t(np.ones((1, 1, 2, 2))), t(np.full((1, 1, 2, 2), 2.0))
        out = concat_channels(a, b)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data[:, :1], a.data)
        np.testing.assert_array_equal(out.data[:, 1:], b.data)

    def test_concat_zeros_slice_identity(self):
        rng = np.random.default_rng(7)
        x = t(rng.random((2, 3, 4, 4)))
        out = concat_channels(x, t(np.zeros((2, 2, 4, 4))))
        np.testing.assert_array_equal(out.data[:, :3], x.data)

    def test_gradient_splits(self):
        a = t(np.zeros((1, 2, 3, 3)), rg=True)
        b = t(np.zeros((1, 1, 3, 3)), rg=True)
        tensor_sum(concat_channels(a, b)).backward()
        assert (a.grad == 1).all() and (b.grad == 1).all()

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError):
            concat_channels(t(np.zeros((1, 1, 3, 3))), t(np.zeros((1, 1, 4, 4))))


class TestMseNormalized:
    def test_identity_zero(self):
        x = t(np.random.default_rng(8).random((2, 1, 4, 4)))
        assert mse_normalized(x, x).item() == 0.0

    def test_hand_example(self):
        loss = mse_normalized(t([[1, 0], [0, 1]]), t([[0, 0], [0, 1]]))
        assert loss.item() == pytest.approx(0.25, abs=1e-7)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((3, 3)), rng.random((3, 3))
        base = mse_normalized(t(a), t(b)).item()
        scaled = mse_normalized(t(4 * a), t(4 * b)).item()
        assert scaled == pytest.approx(16 * base, rel=1e-5)

    def test_nonnegative(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
            assert mse_normalized(t(a), t(b)).item() >= 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            mse_normalized(t(np.zeros((2, 2))), t(np.zeros((3, 3))))


class TestBackward:
    def test_sum_gradient_ones(self):
        x = t(np.random.default_rng(11).random((3, 4)), rg=True)
        tensor_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_mse_hand_gradient(self):
        x = t([2.0], rg=True)
        mse_normalized(x, t([0.0])).backward()
        assert x.grad.tolist() == [4.0]   # 2*(x-0)/(w*h) with w*h == 1

    def test_non_scalar_raises(self):
        x = t(np.zeros((2, 2)), rg=True)
        with pytest.raises(ShapeError):
            relu(x).backward()

    def test_detached_raises(self):
        x = t([1.0])
        with pytest.raises(RuntimeError):
            tensor_sum(x).backward()

    def test_repeat_backward_raises(self):
        x = t([1.0], rg=True)
        s = tensor_sum(x)
        s.backward()
        with pytest.raises(RuntimeError):
            s.backward()


class TestResizeArea:
    def test_constant_preserved(self):
        out = resize_area(t(np.full((1, 1, 4, 4), 2.5)), 2, 2)
        assert (out.data == 2.5).all()

    def test_hand_average(self):
        out = resize_area(t([[1.0, 3.0], [5.0, 7.0]]), 1, 1)
        assert out.data.tolist() == [[4.0]]

    def test_global_mean_preserved(self):
        rng = np.random.default_rng(12)
        x = rng.random((1, 3, 8, 8)).astype(np.float32)
        out = resize_area(t(x), 4, 4)
        np.testing.assert_allclose(out.data.mean(), x.mean(), atol=1e-6)
        np.testing.assert_allclose(out.data, area_resize_mean(x, 4, 4), atol=1e-6)

    def test_non_divisible_extents(self):
        rng = np.random.default_rng(13)
        x = rng.random((5, 7)).astype(np.float32)
        out = resize_area(t(x), 3, 3)
        assert out.shape == (3, 3)
        np.testing.assert_allclose(out.data.mean(), x.mean(), atol=1e-4)

    def test_upscale_routes_to_bilinear(self):
        out = resize_area(t(np.full((2, 2), 1.5)), 4, 4)
        assert out.shape == (4, 4)
        np.testing.assert_allclose(out.data, np.full((4, 4), 1.5), atol=1e-6)


class TestGradients:
    """Analytic vs. central finite differences for every differentiable op."""

    def test_conv2d(self):
        rng = np.random.default_rng(20)
        for _ in range(5):
            err = fd_gradcheck(
                lambda x, k, b: conv2d(x, k, b, stride=1, padding="same"),
                [(1, 2, 4, 4), (3, 2, 3, 3), (3,)], rng)
            assert err < 1e-3

    def test_conv2d_strided(self):
        rng = np.random.default_rng(21)
        err = fd_gradcheck(
            lambda x, k, b: conv2d(x, k, b, stride=2, padding=1),
            [(1, 2, 6, 6), (2, 2, 4, 4), (2,)], rng)
        assert err < 1e-3

    def test_maxpool2(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            err = fd_gradcheck(maxpool2, [(1, 2, 4, 4)], rng)
            assert err < 1e-3

    def test_relu(self):
        rng = np.random.default_rng(23)
        err = fd_gradcheck(relu, [(3, 5)], rng)
        assert err < 1e-3

    def test_deconv2d(self):
        rng = np.random.default_rng(24)
        for _ in range(5):
            err = fd_gradcheck(lambda x, k, b: deconv2d(x, k, b),
                               [(1, 2, 3, 3), (2, 2, 4, 4), (2,)], rng)
            assert err < 1e-3

    def test_concat(self):
        rng = np.random.default_rng(25)
        err = fd_gradcheck(concat_channels, [(1, 2, 3, 3), (1, 1, 3, 3)], rng)
        assert err < 1e-3

    def test_resize_area(self):
        rng = np.random.default_rng(26)
        err = fd_gradcheck(lambda x: resize_area(x, 2, 2), [(1, 1, 4, 4)], rng)
        assert err < 1e-3


class TestDeterminism:
    def test_replay_bit_identical(self):
        rng = np.random.default_rng(30)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)

        def run():
            out = maxpool2(relu(conv2d(t(x), t(k), t(b))))
            return resize_area(out, 2, 2).data

        first = run()
        for _ in range(3):
            np.testing.assert_array_equal(run(), first)
