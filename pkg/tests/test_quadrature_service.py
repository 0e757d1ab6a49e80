import unittest
import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np

from services.quadrature_service import (adaptive_gauss_legendre, composite_gauss_legendre,
                                         gauss_legendre_nodes, sphere_rule)


class TestQuadratureService(unittest.TestCase):
    """Gauss-Legendre rules used by the equilibrium and coefficient code"""

    def test_nodes_integrate_polynomials_exactly(self):
        """An n-point rule is exact up to degree 2n - 1"""
        nodes, weights = gauss_legendre_nodes(5, 1.0, 3.0)
        self.assertAlmostEqual(float(nodes ** 9 @ weights), (3.0 ** 10 - 1.0) / 10.0, places=9)
        self.assertAlmostEqual(float(weights.sum()), 2.0, places=14)

    def test_invalid_order(self):
        """Order zero is rejected"""
        with self.assertRaises(ValueError):
            gauss_legendre_nodes(0, 0.0, 1.0)

    def test_composite_rule(self):
        """Composite rule on a smooth integrand"""
        self.assertAlmostEqual(composite_gauss_legendre(np.exp, 0.0, 1.0), np.e - 1.0, places=13)

    def test_adaptive_rule_with_peak(self):
        """Adaptive rule resolves a sharp peak to the requested tolerance"""
        f = lambda x: 1.0 / (1e-4 + x ** 2)
        value, err = adaptive_gauss_legendre(f, -1.0, 1.0, rtol=1e-12)
        exact = 2.0 * np.arctan(1.0 / 1e-2) / 1e-2
        self.assertLess(abs(value - exact) / exact, 1e-10)
        self.assertGreaterEqual(err, 0.0)

    def test_adaptive_empty_interval(self):
        """A zero-length interval integrates to zero"""
        self.assertEqual(adaptive_gauss_legendre(np.exp, 1.0, 1.0), (0.0, 0.0))

    def test_sphere_rule(self):
        """Sphere rule: total area and the fourth moments of a coordinate"""
        points, weights = sphere_rule(16, 32)
        np.testing.assert_allclose(np.linalg.norm(points, axis=1), 1.0, atol=1e-14)
        self.assertAlmostEqual(float(weights.sum()), 4.0 * np.pi, places=12)
        self.assertAlmostEqual(float(points[:, 0] ** 4 @ weights), 4.0 * np.pi / 5.0, places=12)
        self.assertAlmostEqual(float((points[:, 0] * points[:, 1]) ** 2 @ weights), 4.0 * np.pi / 15.0, places=12)


if __name__ == '__main__':
    # Run tests
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(unittest.TestLoader().loadTestsFromTestCase(TestQuadratureService))

    # Print summary
    print(f"\nTest Summary:")
    print(f"Tests run: {result.testsRun}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
