"""Kernel-level tests: trivial identities plus independent brute-force oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from cfnet.tensor_ops import (
    conv2d,
    create,
    elementwise,
    maxpool2d,
    reduce_mean_spatial,
)


def conv2d_reference(x, kernel, bias, stride=1, pad=0):
    """Six-nested-loop convolution, the independent oracle."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, hout, wout), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for y in range(hout):
                for xo in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[b, ci, y * stride + ky, xo * stride + kx]
                                        * kernel[co, ci, ky, kx])
                    out[b, co, y, xo] = acc + bias[co]
    return out


def maxpool2d_reference(x, window=2, stride=2):
    """Brute-force window scan with first-index tie-break."""
    n, c, h, w = x.shape
    hout = (h - window) // stride + 1
    wout = (w - window) // stride + 1
    out = np.zeros((n, c, hout, wout), dtype=x.dtype)
    arg = np.zeros((n, c, hout, wout), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(hout):
                for xo in range(wout):
                    win = x[b, ch, y * stride:y * stride + window,
                            xo * stride:xo * stride + window]
                    flat = win.reshape(-1)
                    best = int(np.argmax(flat))
                    out[b, ch, y, xo] = flat[best]
                    arg[b, ch, y, xo] = best
    return out, arg


class TestCreate:
    def test_zeros(self):
        npt.assert_array_equal(create([2, 2], "constant", value=0.0),
                               np.zeros((2, 2), dtype=np.float32))

    def test_constant(self):
        npt.assert_array_equal(create([1], "constant", value=3.5), [3.5])

    def test_uniform_reproducible(self):
        a = create([4], "uniform", seed=7, lo=0.0, hi=1.0)
        b = create([4], "uniform", seed=7, lo=0.0, hi=1.0)
        npt.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_empty_shape_rejected(self):
        with pytest.raises(ValueError, match="empty shape"):
            create([], "zeros")

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            create([2, 0], "zeros")

    def test_rank_cap(self):
        with pytest.raises(ValueError, match="rank"):
            create([1, 1, 1, 1, 1], "zeros")


class TestElementwise:
    def test_relu(self):
        npt.assert_array_equal(
            elementwise("relu", np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_add(self):
        npt.assert_array_equal(
            elementwise("add", np.array([1.0, 2.0]), np.array([3.0, 4.0])),
            [4.0, 6.0])

    def test_scale(self):
        npt.assert_array_equal(
            elementwise("scale", np.array([1.0, 2.0]), 0.5), [0.5, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            elementwise("add", np.zeros(2), np.zeros(3))


class TestConv2d:
    def test_1x1_identity(self):
        """An identity channel-mixing matrix with zero bias is a no-op."""
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        kernel = np.eye(3)[:, :, None, None].astype(x.dtype)
        out = conv2d(x, kernel, np.zeros(3), stride=1, pad=0)
        npt.assert_array_equal(out, x)

    def test_all_ones_3x3(self):
        x = np.ones((1, 1, 3, 3))
        kernel = np.ones((1, 1, 3, 3))
        out = conv2d(x, kernel, np.zeros(1), stride=1, pad=0)
        npt.assert_array_equal(out, [[[[9.0]]]])

    @pytest.mark.parametrize("seed", range(6))
    def test_against_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 9))
        cout = int(rng.integers(1, 6))
        h = int(rng.integers(3, 17))
        w = int(rng.integers(3, 17))
        ksize, pad = (3, 1) if seed % 2 == 0 else (1, 0)
        x = rng.uniform(-1, 1, (n, cin, h, w))
        kernel = rng.uniform(-1, 1, (cout, cin, ksize, ksize))
        bias = rng.uniform(-1, 1, cout)
        expected = conv2d_reference(x, kernel, bias, stride=1, pad=pad)
        npt.assert_allclose(conv2d(x, kernel, bias, stride=1, pad=pad),
                            expected, atol=1e-12, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 1, 1)), np.zeros(1))

    def test_non_integral_output(self):
        with pytest.raises(ValueError, match="non-integral"):
            conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)),
                   np.zeros(1), stride=2, pad=0)

    def test_bit_reproducible(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (2, 4, 8, 8)).astype(np.float32)
        kernel = rng.uniform(-1, 1, (5, 4, 3, 3)).astype(np.float32)
        bias = rng.uniform(-1, 1, 5).astype(np.float32)
        a = conv2d(x, kernel, bias, pad=1)
        b = conv2d(x, kernel, bias, pad=1)
        assert a.tobytes() == b.tobytes()


class TestMaxpool2d:
    def test_single_window(self):
        out, arg = maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        npt.assert_array_equal(out, [[[[4.0]]]])
        # offset 3 is (row 1, col 1) in row-major window order
        assert arg[0, 0, 0, 0] == 3

    def test_constant_first_index_tiebreak(self):
        out, arg = maxpool2d(np.full((1, 1, 4, 4), 7.0))
        npt.assert_array_equal(out, np.full((1, 1, 2, 2), 7.0))
        assert np.all(arg == 0)

    @pytest.mark.parametrize("seed", range(4))
    def test_against_window_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (1, 1, 8, 8))
        out, arg = maxpool2d(x)
        exp_out, exp_arg = maxpool2d_reference(x)
        npt.assert_array_equal(out, exp_out)
        npt.assert_array_equal(arg, exp_arg)

    def test_window_larger_than_input(self):
        with pytest.raises(ValueError, match="larger than input"):
            maxpool2d(np.zeros((1, 1, 1, 1)), window=2, stride=2)


class TestReduceMeanSpatial:
    def test_basic_mean(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        npt.assert_array_equal(reduce_mean_spatial(x), [[2.5]])

    def test_constant(self):
        x = np.full((2, 3, 5, 7), 1.25)
        npt.assert_array_equal(reduce_mean_spatial(x), np.full((2, 3), 1.25))

    def test_1x1_identity(self):
        x = np.array([[[[42.0]]]])
        npt.assert_array_equal(reduce_mean_spatial(x), [[42.0]])

    def test_linearity(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (2, 3, 6, 6))
        y = rng.uniform(-1, 1, (2, 3, 6, 6))
        lhs = reduce_mean_spatial(2.5 * x + 0.5 * y)
        rhs = 2.5 * reduce_mean_spatial(x) + 0.5 * reduce_mean_spatial(y)
        npt.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)
