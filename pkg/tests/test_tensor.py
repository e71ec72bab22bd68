"""
Unit tests for tensor core module
"""

import io
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from coordconv_lab import nn_ops
from coordconv_lab.rng import Rng
from coordconv_lab.tensor import (Graph, GraphError, NonFiniteError, Normal, ShapeError, Tensor, Uniform, concat,
                                  finite_diff_check, load_checkpoint, no_grad, read_tensor, save_checkpoint,
                                  tensor_new, write_tensor)


class TestTensorNew(unittest.TestCase):

    def test_constant_fill(self):
        """Constant fill gives the constant everywhere"""
        t = tensor_new([2, 2], 0.0)
        np.testing.assert_array_equal(t.data, [[0, 0], [0, 0]])
        self.assertEqual(t.dtype, np.float32)

    def test_uniform_fill_deterministic(self):
        """Same seed gives the same uniform triple"""
        a = tensor_new([3], Uniform(-1, 1), Rng(7))
        b = tensor_new([3], Uniform(-1, 1), Rng(7))
        np.testing.assert_array_equal(a.data, b.data)
        self.assertTrue(np.all(np.abs(a.data) <= 1))

    def test_normal_fill_mean(self):
        """Sample mean of 4096 normals lies within three standard errors"""
        t = tensor_new([4096], Normal(0, 0.05), Rng(11), dtype=np.float64)
        self.assertLess(abs(t.data.mean()), 3 * 0.05 / 64)

    def test_bad_extent(self):
        """Zero and negative extents are rejected"""
        with self.assertRaises(ShapeError):
            tensor_new([2, 0], 0.0)
        with self.assertRaises(ShapeError):
            tensor_new([-1], 0.0)

    def test_negative_std(self):
        """Normal fill needs std >= 0"""
        with self.assertRaises(ValueError):
            tensor_new([2], Normal(0, -1), Rng(0))

    def test_random_fill_needs_rng(self):
        with self.assertRaises(ValueError):
            tensor_new([2], Uniform(0, 1))


class TestBackward(unittest.TestCase):

    def test_sum_gradient(self):
        """loss = sum(x) gives ones"""
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Graph() as graph:
            loss = x.sum()
            graph.backward(loss)
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square_gradient(self):
        """loss = sum(x*x) gives 2x"""
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Graph() as graph:
            loss = (x * x).sum()
            graph.backward(loss)
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_accumulates_over_paths(self):
        """A tensor used twice receives the sum of both path gradients"""
        x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
        with Graph() as graph:
            y = x * 3.0
            loss = (y + x * 2.0).sum()
            graph.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_non_parameter_leaves_untouched(self):
        """Leaves without requires_grad get no gradient"""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        c = Tensor(np.array([3.0, 4.0]))
        with Graph() as graph:
            graph.backward((x * c).sum())
        self.assertIsNone(c.grad)
        np.testing.assert_array_equal(x.grad, [3, 4])

    def test_broadcast_gradient(self):
        """Broadcast operands get summed gradients"""
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Graph() as graph:
            graph.backward((x + b).sum())
        np.testing.assert_array_equal(b.grad, [2, 2, 2])

    def test_consumed_graph(self):
        """A graph cannot be replayed"""
        x = Tensor(np.array([1.0]), requires_grad=True)
        with Graph() as graph:
            loss = (x * x).sum()
            graph.backward(loss)
            with self.assertRaises(GraphError):
                graph.backward(loss)

    def test_non_scalar_loss(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Graph() as graph:
            with self.assertRaises(GraphError):
                graph.backward(x * x)

    def test_foreign_loss(self):
        """A loss recorded on another graph is rejected"""
        x = Tensor(np.array([1.0]), requires_grad=True)
        with Graph():
            loss = (x * x).sum()
        with Graph() as other:
            with self.assertRaises(GraphError):
                other.backward(loss)

    def test_no_recording_outside_graph(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x * x
        self.assertFalse(y.requires_grad)
        with Graph() as graph:
            with no_grad():
                z = x * x
            self.assertEqual(len(graph), 0)
        self.assertFalse(z.requires_grad)

    def test_non_finite_forward(self):
        """NaN in a forward result raises"""
        x = Tensor(np.array([np.inf]))
        with self.assertRaises(NonFiniteError):
            x - x

    def test_concat_gradient(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        weights = Tensor(np.arange(5.0).reshape(1, 5))
        with Graph() as graph:
            graph.backward((concat([a, b], axis=1) * weights).sum())
        np.testing.assert_array_equal(a.grad, [[0, 1]])
        np.testing.assert_array_equal(b.grad, [[2, 3, 4]])


class TestFiniteDiffCheck(unittest.TestCase):

    def test_sum(self):
        """f = sum has zero error up to rounding"""
        x = tensor_new([5], Uniform(-1, 1), Rng(3), dtype=np.float64)
        self.assertLess(finite_diff_check(lambda t: t.sum(), x), 1e-9)

    def test_softmax_composite(self):
        """Softmax cross-entropy of a scaled input passes in double precision"""
        x = tensor_new([3, 6], Uniform(-2, 2), Rng(5), dtype=np.float64)
        targets = np.array([0, 4, 5])
        error = finite_diff_check(lambda t: nn_ops.softmax_xent(t * 1.5, targets), x)
        self.assertLess(error, 1e-6)

    def test_float32_composite(self):
        """Single precision with the scaled default step stays under 1e-3"""
        x = tensor_new([3], Uniform(0.5, 1.0), Rng(9), dtype=np.float32)
        error = finite_diff_check(lambda t: (t * t).sum(), x)
        self.assertLess(error, 1e-3)

    def test_multiple_tensors(self):
        a = Tensor(np.array([0.7, -0.4, 0.9]))
        b = Tensor(np.array([-0.6, 0.8, 0.3]))
        self.assertLess(finite_diff_check(lambda x, y: (x * y).sum(), [a, b]), 1e-6)

    def test_restores_gradient_flags(self):
        """requires_grad and grad are left as they were before the check"""
        frozen = Tensor(np.array([0.5, -1.5]))
        tracked = Tensor(np.array([2.0, 0.25]), requires_grad=True)
        tracked.grad = np.array([9.0, 9.0])
        finite_diff_check(lambda x, y: (x * y).sum(), [frozen, tracked])
        self.assertFalse(frozen.requires_grad)
        self.assertIsNone(frozen.grad)
        self.assertTrue(tracked.requires_grad)
        np.testing.assert_array_equal(tracked.grad, [9.0, 9.0])

    def test_restores_flags_on_error(self):
        x = Tensor(np.array([np.inf, 1.0]))
        with self.assertRaises(NonFiniteError):
            finite_diff_check(lambda t: (t - t).sum(), x)
        self.assertFalse(x.requires_grad)

    def test_nan_output(self):
        """A NaN-producing function signals an error instead of returning a number"""
        x = Tensor(np.array([np.inf, 1.0]))
        with self.assertRaises(NonFiniteError):
            finite_diff_check(lambda t: (t - t).sum(), x)

    def test_non_scalar_output(self):
        x = Tensor(np.array([1.0, 2.0]))
        with self.assertRaises(ValueError):
            finite_diff_check(lambda t: t * t, x)


class TestSerialization(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_tensor_record_layout(self):
        """TNSR1 header: magic, u32 rank, u32 extents, u8 dtype code"""
        buffer = io.BytesIO()
        write_tensor(buffer, np.arange(6, dtype=np.float64).reshape(2, 3))
        raw = buffer.getvalue()
        self.assertEqual(raw[:5], b'TNSR1')
        self.assertEqual(raw[5:9], (2).to_bytes(4, 'little'))
        self.assertEqual(raw[9:17], (2).to_bytes(4, 'little') + (3).to_bytes(4, 'little'))
        self.assertEqual(raw[17], 1)
        self.assertEqual(len(raw), 18 + 6 * 8)
        buffer.seek(0)
        np.testing.assert_array_equal(read_tensor(buffer).data, np.arange(6).reshape(2, 3))

    def test_checkpoint(self):
        path = os.path.join(self.test_dir, 'model.tnsr')
        named = {'00_conv.weight': np.ones((1, 1, 2, 3), dtype=np.float32), 'bias': np.zeros(3, dtype=np.float32)}
        save_checkpoint(path, named)
        loaded = load_checkpoint(path)
        self.assertEqual(list(loaded), list(named))
        np.testing.assert_array_equal(loaded['00_conv.weight'], named['00_conv.weight'])
        self.assertEqual(loaded['bias'].dtype, np.float32)

    def test_bad_magic(self):
        path = os.path.join(self.test_dir, 'bad.tnsr')
        with open(path, 'wb') as f:
            f.write(b'NOPE!')
        with self.assertRaises(ValueError):
            load_checkpoint(path)


if __name__ == '__main__':
    unittest.main()
