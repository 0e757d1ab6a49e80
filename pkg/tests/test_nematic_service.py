import unittest
import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
from scipy import sparse

from services.nematic_service import (
    DegenerateMaximumError, build_qtensor, build_qtensors, jacobi_eigh, maximizer_objective,
    principal_eigvec, principal_eigvecs, relaxation_drift, smoothed_eigvec_error,
)
from services.quaternion_service import I, J, ONE, dot, exp_map, mul, sample_uniform, tangent_project, unit


class TestNematicService(unittest.TestCase):
    """Base fixtures for nematic averaging"""

    def setUp(self):
        """Set up a seeded generator and a concentrated ensemble"""
        self.rng = np.random.default_rng(42)
        self.center = unit(np.array([0.3, -0.5, 0.7, 0.2]))
        spread = exp_map(0.2 * self.rng.standard_normal((500, 3)))
        signs = np.where(self.rng.random(500) < 0.5, -1.0, 1.0)
        self.ensemble = mul(spread, self.center) * signs[:, None]


class TestQTensor(TestNematicService):
    """Construction of Q-tensors"""

    def test_traceless_and_symmetric(self):
        """Unit weights give a symmetric traceless tensor"""
        Q = build_qtensor(self.ensemble, np.ones(len(self.ensemble)))
        np.testing.assert_allclose(Q, Q.T, atol=1e-15)
        self.assertAlmostEqual(float(np.trace(Q)), 0.0, places=13)

    def test_sign_flip_invariance(self):
        """Flipping the sign of any member leaves the tensor unchanged"""
        weights = self.rng.random(len(self.ensemble))
        flipped = self.ensemble * np.where(self.rng.random(len(self.ensemble)) < 0.5, -1.0, 1.0)[:, None]
        np.testing.assert_allclose(build_qtensor(self.ensemble, weights), build_qtensor(flipped, weights), atol=1e-15)

    def test_invalid_weights(self):
        """Negative, all-zero or mismatched weights are rejected"""
        q = self.ensemble[:3]
        for weights in (np.array([1.0, -1.0, 1.0]), np.zeros(3), np.ones(2)):
            with self.assertRaises(ValueError):
                build_qtensor(q, weights)

    def test_batched_sparse_matches_single(self):
        """build_qtensors with a sparse weight matrix equals row-by-row build_qtensor"""
        W = self.rng.random((6, len(self.ensemble)))
        W[W < 0.7] = 0.0
        batched = build_qtensors(self.ensemble, sparse.csr_matrix(W))
        dense = build_qtensors(self.ensemble, W)
        np.testing.assert_allclose(batched, dense, atol=1e-14)
        for k in range(6):
            np.testing.assert_allclose(batched[k], build_qtensor(self.ensemble, W[k]), atol=1e-14)


class TestEigenSolver(TestNematicService):
    """Cyclic Jacobi on 4x4 symmetric matrices"""

    def test_matches_reference(self):
        """Eigenpairs agree with numpy and reconstruct the matrix"""
        A = self.rng.standard_normal((200, 4, 4))
        A = A + np.swapaxes(A, 1, 2)
        values, vectors = jacobi_eigh(A)
        expected = np.linalg.eigvalsh(A)[:, ::-1]
        np.testing.assert_allclose(values, expected, atol=1e-12)
        rebuilt = vectors @ (values[:, :, None] * np.swapaxes(vectors, 1, 2))
        np.testing.assert_allclose(rebuilt, A, atol=1e-12)
        self.assertTrue(np.all(np.diff(values, axis=1) <= 0.0))

    def test_diagonal_input(self):
        """Already diagonal matrices are sorted and returned unchanged"""
        values, vectors = jacobi_eigh(np.diag([0.1, 0.4, -0.2, 0.3]))
        np.testing.assert_array_equal(values, [0.4, 0.3, 0.1, -0.2])
        np.testing.assert_array_equal(np.abs(vectors[:, 0]), [0.0, 1.0, 0.0, 0.0])


class TestPrincipalDirection(TestNematicService):
    """Nematic mean and relaxation"""

    def test_recovers_center_up_to_sign(self):
        """The principal eigenvector of a concentrated ensemble is near +-center"""
        Q = build_qtensor(self.ensemble, np.ones(len(self.ensemble)))
        mean = principal_eigvec(Q, hint=self.center)
        self.assertGreater(float(dot(mean.qbar, self.center)), 0.95)
        self.assertGreater(mean.spectral_gap, 0.0)
        flipped = principal_eigvec(Q, hint=-self.center)
        np.testing.assert_allclose(flipped.qbar, -mean.qbar)

    def test_maximizes_objective(self):
        """No unit quaternion beats qbar on q.Qq"""
        Q = build_qtensor(self.ensemble, np.ones(len(self.ensemble)))
        mean = principal_eigvec(Q)
        best = maximizer_objective(Q, mean.qbar)
        self.assertAlmostEqual(best, mean.lambda_max, places=12)
        for q in sample_uniform(self.rng, 1000):
            self.assertLessEqual(maximizer_objective(Q, q), best + 1e-12)

    def test_degenerate_maximum(self):
        """A multiple top eigenvalue raises unless ties are allowed"""
        Q = np.diag([0.25, 0.25, -0.25, -0.25])
        with self.assertRaises(DegenerateMaximumError):
            principal_eigvec(Q)
        mean = principal_eigvec(Q, allow_ties=True)
        self.assertAlmostEqual(mean.lambda_max, 0.25)
        self.assertEqual(mean.spectral_gap, 0.0)

    def test_orthogonal_pair_is_degenerate(self):
        """Two orthogonal attitudes give eigenvalues 1/4, 1/4, -1/4, -1/4 and no unique mean"""
        other = unit(tangent_project(self.center, self.rng.standard_normal(4)))
        self.assertAlmostEqual(float(dot(self.center, other)), 0.0, places=14)
        Q = build_qtensor(np.stack([self.center, other]), np.ones(2))
        values, _ = jacobi_eigh(Q)
        np.testing.assert_allclose(values, [0.25, 0.25, -0.25, -0.25], atol=1e-14)
        with self.assertRaises(DegenerateMaximumError):
            principal_eigvec(Q)

    def test_gap_tolerance_is_relative(self):
        """Rescaling a tensor changes neither the extracted axis nor the tie decision"""
        simple = 1e-12 * np.diag([0.3, 0.1, -0.2, -0.2])
        tied = 1e-12 * np.diag([0.25, 0.25, -0.25, -0.25])
        mean = principal_eigvec(simple)
        np.testing.assert_allclose(np.abs(mean.qbar), ONE, atol=1e-14)
        with self.assertRaises(DegenerateMaximumError):
            principal_eigvec(tied)
        _, _, degenerate = principal_eigvecs(np.stack([simple, tied, 1e6 * simple]))
        np.testing.assert_array_equal(degenerate, [False, True, False])

    def test_batched_flags_ties(self):
        """principal_eigvecs flags degenerate rows instead of raising"""
        Q = np.stack([np.diag([0.3, 0.1, -0.2, -0.2]), np.zeros((4, 4))])
        qbar, lam, degenerate = principal_eigvecs(Q, hints=np.stack([-ONE, ONE]))
        np.testing.assert_array_equal(degenerate, [False, True])
        np.testing.assert_allclose(qbar[0], -ONE)
        self.assertAlmostEqual(float(lam[0]), 0.3)

    def test_relaxation_drift(self):
        """The drift is tangent, vanishes at +-qbar and is odd in q, even in qbar"""
        q = sample_uniform(self.rng, 1000)
        drift = relaxation_drift(self.center, q)
        np.testing.assert_allclose(dot(drift, q), 0.0, atol=1e-14)
        np.testing.assert_allclose(relaxation_drift(self.center, -q), -drift, atol=1e-15)
        np.testing.assert_allclose(relaxation_drift(-self.center, q), drift, atol=1e-15)
        np.testing.assert_allclose(relaxation_drift(self.center, self.center), 0.0, atol=1e-15)

    def test_drift_vanishes_on_rest_set(self):
        """The drift is zero at q = +-qbar and on the great sphere orthogonal to qbar"""
        np.testing.assert_allclose(relaxation_drift(self.center, -self.center), 0.0, atol=1e-15)
        orthogonal = unit(tangent_project(self.center, self.rng.standard_normal((200, 4))))
        np.testing.assert_allclose(dot(orthogonal, self.center), 0.0, atol=1e-14)
        np.testing.assert_allclose(relaxation_drift(self.center, orthogonal), 0.0, atol=1e-14)

    def test_drift_increases_alignment(self):
        """Moving along the drift increases (qbar.q)^2"""
        q = sample_uniform(self.rng, 1000)
        before = dot(self.center, q) ** 2
        after = dot(self.center, unit(q + 1e-3 * relaxation_drift(self.center, q))) ** 2
        self.assertTrue(np.all(after >= before - 1e-15))


class TestSmoothedField(unittest.TestCase):
    """Local nematic mean of a smooth attitude field"""

    def test_error_scales_quadratically(self):
        """The eigenvector error has log-log slope about two in the kernel width"""
        field = lambda x: unit(ONE[None] + x[:, None] * I[None] + (x ** 2)[:, None] * J[None])
        eps = np.array([0.2, 0.1, 0.05, 0.025])
        errors = np.array([smoothed_eigvec_error(field, 0.3, e) for e in eps])
        self.assertTrue(np.all(errors > 0.0))
        slope = np.polyfit(np.log(eps), np.log(errors), 1)[0]
        self.assertGreaterEqual(slope, 1.8, f"errors {errors}")


if __name__ == '__main__':
    # Create test suite
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    # Add all test classes
    test_classes = [
        TestQTensor,
        TestEigenSolver,
        TestPrincipalDirection,
        TestSmoothedField,
    ]

    for test_class in test_classes:
        tests = loader.loadTestsFromTestCase(test_class)
        suite.addTests(tests)

    # Run tests
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    # Print summary
    print(f"\nTest Summary:")
    print(f"Tests run: {result.testsRun}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print(f"Success rate: {((result.testsRun - len(result.failures) - len(result.errors)) / result.testsRun * 100):.1f}%")
