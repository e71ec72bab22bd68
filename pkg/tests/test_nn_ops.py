"""
Unit tests for neural network operations
"""

import math
import os
import sys
import unittest

import numpy as np

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from coordconv_lab import nn_ops
from coordconv_lab.nn_ops import BatchNormState, ConvSpec, CoordSpec
from coordconv_lab.rng import STREAM_CHECKS, Rng
from coordconv_lab.selftest import (ADJOINT_TOLERANCE, GRADIENT_FLOOR, GRADIENT_TOLERANCE, adjoint_gap,
                                    degenerate_coord_conv_matches, gradient_cases)
from coordconv_lab.tensor import Graph, ShapeError, Tensor, finite_diff_check


def direct_conv(x, w, b, stride, padding):
    """Direct summation reference for conv2d"""
    n, h, width, c = x.shape
    k, c_out = w.shape[0], w.shape[3]
    oh, top, _ = nn_ops.conv_output_extent(h, k, stride, padding)
    ow, left, _ = nn_ops.conv_output_extent(width, k, stride, padding)
    out = np.zeros((n, oh, ow, c_out))
    for example in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(c_out):
                    total = b[o]
                    for a in range(k):
                        for bb in range(k):
                            row, col = i * stride + a - top, j * stride + bb - left
                            if 0 <= row < h and 0 <= col < width:
                                total += np.dot(x[example, row, col, :], w[a, bb, :, o])
                    out[example, i, j, o] = total
    return out


class TestAddCoords(unittest.TestCase):

    def test_three_by_three(self):
        """i channel runs -1, 0, 1 down the rows; j channel is its transpose"""
        out = nn_ops.add_coords(Tensor(np.zeros((1, 3, 3, 1), dtype=np.float32))).data
        self.assertEqual(out.shape, (1, 3, 3, 3))
        expected = np.array([[-1, -1, -1], [0, 0, 0], [1, 1, 1]], dtype=np.float32)
        np.testing.assert_array_equal(out[0, :, :, 1], expected)
        np.testing.assert_array_equal(out[0, :, :, 2], expected.T)
        np.testing.assert_array_equal(out[0, :, :, 0], np.zeros((3, 3)))

    def test_radius_channel(self):
        """Normalized r is 1 at the corner and 0 at the center pixel"""
        out = nn_ops.add_coords(Tensor(np.zeros((1, 4, 4, 1))), CoordSpec(with_r=True)).data
        self.assertEqual(out.shape[-1], 4)
        self.assertAlmostEqual(float(out[0, 0, 0, 3]), 1.0)
        self.assertAlmostEqual(float(out[0, 2, 2, 3]), 0.0)

    def test_single_row(self):
        out = nn_ops.add_coords(Tensor(np.zeros((1, 1, 3, 1)))).data
        np.testing.assert_array_equal(out[0, 0, :, 1], [0, 0, 0])
        np.testing.assert_array_equal(out[0, 0, :, 2], [-1, 0, 1])

    def test_coordinates_read_only(self):
        coords = nn_ops.coordinate_channels(4, 4)
        with self.assertRaises(ValueError):
            coords[0, 0, 0] = 5.0


class TestConv2d(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.rng = Rng(0, STREAM_CHECKS)

    def test_identity_kernel(self):
        """1x1 kernel of weight 1 and bias 0 is the identity"""
        x = Tensor(self.rng.uniform((2, 5, 5, 1), -1, 1, dtype=np.float32))
        spec = ConvSpec(k=1, c_in=1, c_out=1)
        out = nn_ops.conv2d(x, spec, Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)),
                            Tensor(np.zeros(1, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_of_ones(self):
        """3x3 ones kernel over a 3x3 input of ones with valid padding gives 9"""
        spec = ConvSpec(k=3, c_in=1, c_out=1, padding='valid', bias=False)
        out = nn_ops.conv2d(Tensor(np.ones((1, 3, 3, 1))), spec, Tensor(np.ones((3, 3, 1, 1))))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(out.item(), 9.0)

    def test_matches_direct_summation(self):
        """Random 6x6x2 input, k=3, three output channels, every stride and padding"""
        x = self.rng.uniform((2, 6, 6, 2), -1, 1)
        w = self.rng.uniform((3, 3, 2, 3), -1, 1)
        b = self.rng.uniform(3, -1, 1)
        for stride in (1, 2):
            for padding in nn_ops.PADDINGS:
                spec = ConvSpec(k=3, c_in=2, c_out=3, stride=stride, padding=padding)
                out = nn_ops.conv2d(Tensor(x), spec, Tensor(w), Tensor(b)).data
                np.testing.assert_allclose(out, direct_conv(x, w, b, stride, padding), rtol=1e-5, atol=1e-12)

    def test_same_padding_extents(self):
        """Same padding puts the smaller half of the pad before"""
        self.assertEqual(nn_ops.conv_output_extent(64, 5, 2, 'same'), (32, 1, 2))
        self.assertEqual(nn_ops.conv_output_extent(7, 3, 1, 'same'), (7, 1, 1))
        self.assertEqual(nn_ops.conv_output_extent(6, 3, 2, 'valid'), (2, 0, 0))

    def test_translation_equivariance(self):
        """Shifting a valid-padding input by one row shifts the output by one row"""
        x = self.rng.uniform((1, 8, 8, 2), -1, 1)
        w = Tensor(self.rng.uniform((3, 3, 2, 2), -1, 1))
        spec = ConvSpec(k=3, c_in=2, c_out=2, padding='valid', bias=False)
        full = nn_ops.conv2d(Tensor(x), spec, w).data
        shifted = nn_ops.conv2d(Tensor(x[:, 1:]), spec, w).data
        np.testing.assert_allclose(shifted, full[:, 1:], rtol=1e-12)

    def test_channel_mismatch(self):
        spec = ConvSpec(k=1, c_in=3, c_out=1, bias=False)
        with self.assertRaises(ShapeError):
            nn_ops.conv2d(Tensor(np.zeros((1, 4, 4, 2))), spec, Tensor(np.zeros((1, 1, 3, 1))))

    def test_bias_flag_mismatch(self):
        """A bias tensor with spec.bias off is a usage error"""
        spec = ConvSpec(k=1, c_in=1, c_out=1, bias=False)
        with self.assertRaises(ValueError):
            nn_ops.conv2d(Tensor(np.zeros((1, 2, 2, 1))), spec, Tensor(np.zeros((1, 1, 1, 1))),
                          Tensor(np.zeros(1)))

    def test_valid_kernel_larger_than_input(self):
        spec = ConvSpec(k=5, c_in=1, c_out=1, padding='valid', bias=False)
        with self.assertRaises(ShapeError):
            nn_ops.conv2d(Tensor(np.zeros((1, 3, 3, 1))), spec, Tensor(np.zeros((5, 5, 1, 1))))


class TestCoordConv(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.rng = Rng(1, STREAM_CHECKS)

    def test_zero_coordinate_weights_bit_identical(self):
        """Zeroed coordinate weights reproduce conv2d exactly"""
        for _ in range(20):
            self.assertTrue(degenerate_coord_conv_matches(self.rng, 8))

    def test_parameter_count(self):
        """c=4, c'=32, k=1, d=2 with bias gives 224"""
        self.assertEqual(nn_ops.coord_conv_param_count(4, 2, 32, 1), 224)
        self.assertEqual(nn_ops.layer_param_count('coordconv', 4, 32, 1, d=2), 224)
        self.assertEqual(ConvSpec(k=1, c_in=6, c_out=32).weight_count + 32, 224)

    def test_split_matches_concat(self):
        """Split and concatenation paths agree to 1e-6"""
        coord_spec = CoordSpec(with_r=True)
        for stride, padding in ((1, 'same'), (2, 'same'), (1, 'valid'), (2, 'valid')):
            spec = ConvSpec(k=3, c_in=2, c_out=4, stride=stride, padding=padding)
            x = Tensor(self.rng.uniform((3, 7, 6, 2), -1, 1))
            w = Tensor(self.rng.uniform((3, 3, 2 + coord_spec.d, 4), -1, 1))
            b = Tensor(self.rng.uniform(4, -1, 1))
            split = nn_ops.coord_conv(x, spec, coord_spec, w, b, path='split').data
            concat = nn_ops.coord_conv(x, spec, coord_spec, w, b, path='concat').data
            self.assertLess(float(np.abs(split - concat).max()), 1e-6)

    def test_split_gradients_match_concat(self):
        coord_spec = CoordSpec()
        spec = ConvSpec(k=3, c_in=1, c_out=2)
        x_data = self.rng.uniform((2, 5, 5, 1), -1, 1)
        w_data = self.rng.uniform((3, 3, 3, 2), -1, 1)
        grads = {}
        for path in nn_ops.COORD_PATHS:
            x = Tensor(x_data.copy(), requires_grad=True)
            w = Tensor(w_data.copy(), requires_grad=True)
            b = Tensor(np.zeros(2), requires_grad=True)
            with Graph() as graph:
                out = nn_ops.coord_conv(x, spec, coord_spec, w, b, path=path)
                graph.backward((out * out).sum())
            grads[path] = (x.grad, w.grad, b.grad)
        for split, concat in zip(grads['split'], grads['concat']):
            np.testing.assert_allclose(split, concat, rtol=1e-10, atol=1e-12)

    def test_unknown_path(self):
        with self.assertRaises(ValueError):
            nn_ops.coord_conv(Tensor(np.zeros((1, 2, 2, 1))), ConvSpec(k=1, c_in=1, c_out=1, bias=False),
                              CoordSpec(), Tensor(np.zeros((1, 1, 3, 1))), path='fused')


class TestConvTranspose(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.rng = Rng(2, STREAM_CHECKS)

    def test_stride_two_doubles_extent(self):
        spec = ConvSpec(k=3, c_in=1, c_out=5, stride=2)
        out = nn_ops.conv2d_transpose(Tensor(np.ones((1, 4, 4, 1))), spec, Tensor(np.ones((3, 3, 5, 1))),
                                      Tensor(np.zeros(5)))
        self.assertEqual(out.shape, (1, 8, 8, 5))

    def test_valid_extent(self):
        self.assertEqual(nn_ops.transpose_output_extent(4, 3, 2, 'valid')[0], 9)

    def test_zero_input_gives_bias(self):
        spec = ConvSpec(k=2, c_in=3, c_out=2, stride=2)
        bias = np.array([0.25, -1.5])
        out = nn_ops.conv2d_transpose(Tensor(np.zeros((2, 3, 3, 3))), spec,
                                      Tensor(self.rng.uniform((2, 2, 2, 3), -1, 1)), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (2, 6, 6, 2)))

    def test_adjoint_identity(self):
        """<conv(y), x> == <y, conv_transpose(x)> over 50 random trials"""
        worst = max(adjoint_gap(self.rng) for _ in range(50))
        self.assertLess(worst, ADJOINT_TOLERANCE)


class TestPoolingAndActivations(unittest.TestCase):

    def test_max_pool(self):
        out = nn_ops.max_pool2(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)))
        self.assertEqual(out.item(), 4.0)

    def test_max_pool_tie_routes_to_first(self):
        """On a tied window the whole gradient goes to the first element"""
        x = Tensor(np.full((1, 2, 2, 1), 2.0), requires_grad=True)
        with Graph() as graph:
            graph.backward(nn_ops.max_pool2(x).sum())
        np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])

    def test_max_pool_odd_extent(self):
        with self.assertRaises(ShapeError):
            nn_ops.max_pool2(Tensor(np.zeros((1, 3, 4, 1))))

    def test_global_avg_pool_constant(self):
        x = np.broadcast_to(np.array([2.5, -1.0]), (3, 4, 5, 2)).copy()
        np.testing.assert_allclose(nn_ops.global_avg_pool(Tensor(x)).data, np.tile([2.5, -1.0], (3, 1)))

    def test_dense(self):
        out = nn_ops.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[1.0], [10.0]])), Tensor(np.array([0.5])))
        self.assertEqual(out.item(), 21.5)

    def test_activations(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(nn_ops.relu(x).data, [0, 0, 3])
        np.testing.assert_allclose(nn_ops.tanh_act(x).data, np.tanh(x.data))
        np.testing.assert_allclose(nn_ops.sigmoid(x).data, 1 / (1 + np.exp(-x.data)))

    def test_sigmoid_saturates_without_overflow(self):
        out = nn_ops.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        np.testing.assert_array_equal(out.data, [0.0, 1.0])


class TestBatchNorm(unittest.TestCase):

    def test_training_normalizes_and_updates(self):
        """Training output has zero mean and unit variance per channel; running stats move by 1 - momentum"""
        rng = Rng(4)
        x = rng.normal((8, 4, 4, 3), 2.0, 3.0)
        state = BatchNormState(3, dtype=np.float64)
        out = nn_ops.batch_norm(Tensor(x), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1, rtol=1e-4)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)))

    def test_eval_uses_running_stats(self):
        state = BatchNormState(1, dtype=np.float64)
        state.running_mean = np.array([1.0])
        state.running_var = np.array([4.0 - state.eps])
        out = nn_ops.batch_norm(Tensor(np.full((1, 1, 1, 1), 5.0)), state, training=False)
        self.assertAlmostEqual(out.item(), 2.0)
        np.testing.assert_array_equal(state.running_mean, [1.0])


class TestLosses(unittest.TestCase):

    def test_uniform_softmax(self):
        """Uniform logits over 4096 classes give ln 4096"""
        loss = nn_ops.softmax_xent(Tensor(np.zeros((2, 4096))), np.array([0, 4095]))
        self.assertAlmostEqual(loss.item(), math.log(4096), places=9)
        self.assertAlmostEqual(loss.item(), 8.31777, places=5)

    def test_saturated_softmax(self):
        logits = np.zeros((1, 4096))
        logits[0, 17] = 30.0
        self.assertLess(nn_ops.softmax_xent(Tensor(logits), np.array([17])).item(), 1e-9)

    def test_softmax_target_out_of_range(self):
        with self.assertRaises(ValueError):
            nn_ops.softmax_xent(Tensor(np.zeros((1, 4))), np.array([4]))

    def test_sigmoid_xent_zero_logits(self):
        targets = (np.arange(16).reshape(1, 4, 4, 1) % 2).astype(np.float64)
        loss = nn_ops.sigmoid_xent_pixelwise(Tensor(np.zeros((1, 4, 4, 1))), targets)
        self.assertAlmostEqual(loss.item(), math.log(2), places=9)

    def test_sigmoid_xent_saturated(self):
        targets = (np.arange(16).reshape(1, 4, 4, 1) % 2).astype(np.float64)
        logits = np.where(targets == 1, 30.0, -30.0)
        self.assertLess(nn_ops.sigmoid_xent_pixelwise(Tensor(logits), targets).item(), 1e-9)

    def test_sigmoid_xent_non_binary(self):
        with self.assertRaises(ValueError):
            nn_ops.sigmoid_xent_pixelwise(Tensor(np.zeros((1, 2))), np.array([[0.0, 0.5]]))

    def test_mse(self):
        pred = np.array([[0.5, -0.25], [1.0, 2.0]])
        self.assertEqual(nn_ops.mse_loss(Tensor(pred), pred).item(), 0.0)
        self.assertEqual(nn_ops.mse_loss(Tensor(pred + 1.0), pred).item(), 1.0)


class TestGradients(unittest.TestCase):

    def test_every_operation(self):
        """Randomized double-precision gradient checks for every operation"""
        rng = Rng(5, STREAM_CHECKS)
        for _ in range(5):
            for name, fn, tensors in gradient_cases(rng):
                error = finite_diff_check(fn, tensors, floor=GRADIENT_FLOOR)
                self.assertLess(error, GRADIENT_TOLERANCE, name)

    def test_layer_param_counts(self):
        """1x1 conv 4 -> 32 with bias has 160 parameters"""
        self.assertEqual(nn_ops.layer_param_count('conv', 4, 32, 1), 160)
        self.assertEqual(nn_ops.layer_param_count('batchnorm', 16), 32)
        self.assertEqual(nn_ops.layer_param_count('maxpool', 16), 0)


if __name__ == '__main__':
    unittest.main()
