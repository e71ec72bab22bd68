"""
Unit tests for self-checks
"""

import os
import shutil
import sys
import tempfile
import unittest

import pandas as pd

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from coordconv_lab.nn_ops import ConvSpec
from coordconv_lab.selftest import SelfTest, adjoint_extent, passed


class TestSelfTest(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.test_dir = tempfile.mkdtemp()
        self.config = {
            'seed': 0,
            'trials': 2,
            'adjoint_trials': 5,
            'degeneracy_inputs': 100,
            'formula_cases': 20,
            'train': {'lr': 0.005, 'epochs': 1, 'batch_size': 16, 'train_limit': 32, 'test_limit': 16,
                      'early_stop_patience': 0},
        }

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_all_checks_pass(self):
        """Every check succeeds and both CSVs are written"""
        out_dir = os.path.join(self.test_dir, 'first')
        results = SelfTest(self.config).run(out_dir)
        failures = [r for r in results if r['status'] != 'success']
        self.assertEqual(failures, [])
        self.assertTrue(passed(results))
        checks = pd.read_csv(os.path.join(out_dir, 'selftest_checks.csv'))
        self.assertEqual(list(checks.columns), ['check', 'status', 'detail'])
        self.assertIn('gradient:conv2d_transpose', checks['check'].tolist())
        self.assertIn('coordconv_degeneracy', checks['check'].tolist())

    def test_short_run_byte_identical(self):
        """Two invocations with the same seed write identical metrics files"""
        contents = []
        for name in ('a', 'b'):
            path = os.path.join(self.test_dir, f'{name}.csv')
            SelfTest(self.config).short_run(path)
            with open(path, 'rb') as f:
                contents.append(f.read())
        self.assertEqual(contents[0], contents[1])
        self.assertNotIn(b'wall_clock_s', contents[0])

    def test_failing_check_is_recorded(self):
        def broken():
            raise AssertionError("gap too large")

        result = SelfTest(self.config).check('broken', broken)
        self.assertEqual(result['status'], 'error')
        self.assertIn('gap too large', result['detail'])
        self.assertFalse(passed([result]))

    def test_adjoint_extent(self):
        self.assertEqual(adjoint_extent(ConvSpec(k=3, c_in=1, c_out=1, stride=2), 3), 6)
        self.assertEqual(adjoint_extent(ConvSpec(k=3, c_in=1, c_out=1, stride=2, padding='valid'), 3), 7)


if __name__ == '__main__':
    unittest.main()
