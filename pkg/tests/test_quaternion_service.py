import unittest
import os
import shutil
import tempfile
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np

from services.quadrature_service import composite_gauss_legendre
from services.quaternion_service import (
    H1_VOLUME, ONE, AxisAngle, PreconditionError, as_quat, conj, dot, dphi, e1, exp_map,
    from_axis_angle, from_axis_angle_array, hat, log_map, matrix_dot, mc_integral, mul, norm,
    outer_from_matrix, pure, rel_derivative, rotate, sample_uniform, so3_average, tangent_project,
    to_axis_angle, to_matrix, unit, vee,
)

N_RANDOM = 10000


class TestQuaternionBase(unittest.TestCase):
    """Shared fixtures for the quaternion algebra tests"""

    def setUp(self):
        """Set up a seeded generator and random batches"""
        self.rng = np.random.default_rng(1234)
        self.p = sample_uniform(self.rng, N_RANDOM)
        self.q = sample_uniform(self.rng, N_RANDOM)
        self.u = self.rng.standard_normal((N_RANDOM, 3))
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up after tests"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)


class TestQuaternionAlgebra(TestQuaternionBase):
    """Products, conjugates and the exponential map"""

    def test_product_is_multiplicative_in_norm(self):
        """|pq| = |p||q| for arbitrary quaternions"""
        a = self.rng.standard_normal((N_RANDOM, 4))
        b = self.rng.standard_normal((N_RANDOM, 4))
        np.testing.assert_allclose(norm(mul(a, b)), norm(a) * norm(b), rtol=1e-12)

    def test_hamilton_convention(self):
        """i j = k and i^2 = -1"""
        i, j, k = np.eye(4)[1], np.eye(4)[2], np.eye(4)[3]
        np.testing.assert_array_equal(mul(i, j), k)
        np.testing.assert_array_equal(mul(i, i), -ONE)

    def test_product_is_associative(self):
        """(pq)r = p(qr)"""
        r = sample_uniform(self.rng, N_RANDOM)
        np.testing.assert_allclose(mul(mul(self.p, self.q), r), mul(self.p, mul(self.q, r)), atol=1e-12)

    def test_conjugate_reverses_products(self):
        """(pq)* = q* p*"""
        np.testing.assert_allclose(conj(mul(self.p, self.q)), mul(conj(self.q), conj(self.p)), atol=1e-12)

    def test_conjugate_is_inverse_on_unit_sphere(self):
        """q q* = 1 for unit q"""
        np.testing.assert_allclose(mul(self.q, conj(self.q)), np.tile(ONE, (N_RANDOM, 1)), atol=1e-12)

    def test_unit_rejects_zero(self):
        """unit raises on a zero quaternion"""
        with self.assertRaises(ValueError):
            unit(np.zeros(4))

    def test_as_quat_rejects_wrong_shape(self):
        """as_quat needs a trailing axis of length 4"""
        with self.assertRaises(ValueError):
            as_quat(np.zeros(3))

    def test_exp_log_round_trip(self):
        """exp(log q) = q with |log q| <= pi"""
        logs = log_map(self.q)
        self.assertTrue(np.all(np.linalg.norm(logs, axis=1) <= np.pi + 1e-12))
        np.testing.assert_allclose(exp_map(logs), self.q, atol=1e-10)

    def test_exp_of_zero(self):
        """exp(0) = 1"""
        np.testing.assert_array_equal(exp_map(np.zeros(3)), ONE)


class TestAxisAngle(TestQuaternionBase):
    """Axis-angle conversions"""

    def test_round_trip(self):
        """to_axis_angle inverts from_axis_angle away from the degenerate angles"""
        for _ in range(200):
            theta = float(self.rng.uniform(0.1, 2.0 * np.pi - 0.1))
            axis = self.rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            aa = to_axis_angle(from_axis_angle(AxisAngle(theta=theta, axis=axis)))
            self.assertAlmostEqual(aa.theta, theta, places=10)
            np.testing.assert_allclose(aa.axis, axis, atol=1e-10)
            self.assertFalse(aa.degenerate)

    def test_identity_is_flagged(self):
        """The axis of the identity is undefined and flagged"""
        aa = to_axis_angle(ONE)
        self.assertTrue(aa.degenerate)
        self.assertEqual(aa.theta, 0.0)
        np.testing.assert_array_equal(aa.axis, [0.0, 0.0, 1.0])

    def test_invalid_inputs(self):
        """Non-unit axes and angles outside [0, 2 pi] are rejected"""
        with self.assertRaises(ValueError):
            AxisAngle(theta=1.0, axis=np.array([1.0, 1.0, 0.0]))
        with self.assertRaises(ValueError):
            AxisAngle(theta=7.0, axis=np.array([1.0, 0.0, 0.0]))


class TestRotationMorphism(TestQuaternionBase):
    """The 2-to-1 map onto rotation matrices"""

    def test_matrices_are_rotations(self):
        """Phi(q) is orthogonal with determinant one"""
        A = to_matrix(self.q)
        eye = np.broadcast_to(np.eye(3), A.shape)
        np.testing.assert_allclose(np.swapaxes(A, 1, 2) @ A, eye, atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(A), 1.0, atol=1e-12)

    def test_sign_invariance(self):
        """Phi(q) = Phi(-q)"""
        np.testing.assert_array_equal(to_matrix(self.q), to_matrix(-self.q))

    def test_group_morphism(self):
        """Phi(pq) = Phi(p) Phi(q)"""
        np.testing.assert_allclose(to_matrix(mul(self.p, self.q)), to_matrix(self.p) @ to_matrix(self.q), atol=1e-12)

    def test_conjugate_maps_to_transpose(self):
        """Phi(q*) = Phi(q)^t"""
        np.testing.assert_allclose(to_matrix(conj(self.q)), np.swapaxes(to_matrix(self.q), 1, 2), atol=1e-12)

    def test_rotate_matches_matrix(self):
        """Im(q v q*) = Phi(q) v"""
        expected = np.einsum("nij,nj->ni", to_matrix(self.q), self.u)
        np.testing.assert_allclose(rotate(self.q, self.u), expected, atol=1e-12)
        direct = mul(mul(self.q, pure(self.u)), conj(self.q))[:, 1:]
        np.testing.assert_allclose(direct, expected, atol=1e-12)

    def test_scalar_product_identity(self):
        """Half the matrix scalar product of Phi(q), Phi(r) is (q.r)^2 - 1/4"""
        lhs = 0.5 * matrix_dot(to_matrix(self.p), to_matrix(self.q))
        np.testing.assert_allclose(lhs, dot(self.p, self.q) ** 2 - 0.25, atol=1e-12)

    def test_first_column(self):
        """e1(q) is the first column of Phi(q)"""
        np.testing.assert_allclose(e1(self.q), to_matrix(self.q)[:, :, 0], atol=1e-14)

    def test_outer_from_matrix(self):
        """q (x) q is recovered from Phi(q) for either sign"""
        outer = self.q[:, :, None] * self.q[:, None, :]
        np.testing.assert_allclose(outer_from_matrix(to_matrix(self.q)), outer, atol=1e-12)

    def test_axis_angle_rotation(self):
        """from_axis_angle gives the rotation by theta about the axis"""
        q = from_axis_angle_array(0.5 * np.pi, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(rotate(q, np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-15)


class TestTangentCalculus(TestQuaternionBase):
    """hat/vee, differential of Phi and relative derivatives"""

    def test_hat_vee(self):
        """[u]x v = u x v and vee inverts hat"""
        v = self.rng.standard_normal((N_RANDOM, 3))
        np.testing.assert_allclose(hat(self.u) @ v[:, :, None], np.cross(self.u, v)[:, :, None], atol=1e-12)
        np.testing.assert_allclose(vee(hat(self.u)), self.u, atol=1e-15)

    def test_dphi_matches_finite_difference(self):
        """dPhi at q along u q equals 2 [u]x Phi(q)"""
        eps = 1e-5
        q, u = self.q[:2000], self.u[:2000]
        forward = to_matrix(mul(exp_map(eps * u), q))
        backward = to_matrix(mul(exp_map(-eps * u), q))
        np.testing.assert_allclose((forward - backward) / (2.0 * eps), dphi(q, u), atol=1e-8)

    def test_tangent_project(self):
        """P_{q-perp} p is orthogonal to q"""
        p = self.rng.standard_normal((N_RANDOM, 4))
        np.testing.assert_allclose(dot(tangent_project(self.q, p), self.q), 0.0, atol=1e-13)

    def test_rel_derivative_of_parametrized_tangent(self):
        """rel_derivative(u q, q) = u"""
        np.testing.assert_allclose(rel_derivative(mul(pure(self.u), self.q), self.q), self.u, atol=1e-12)

    def test_tangential_gradient_of_quadratic_form(self):
        """The derivative of q.Qq along u q is (2 P_{q-perp} Q q).(u q)"""
        eps = 1e-5
        q, u = self.q[:2000], self.u[:2000]
        B = self.rng.standard_normal((4, 4))
        Q = B + B.T
        f = lambda x: np.einsum("ni,ij,nj->n", x, Q, x)
        fd = (f(mul(exp_map(eps * u), q)) - f(mul(exp_map(-eps * u), q))) / (2.0 * eps)
        grad = 2.0 * tangent_project(q, q @ Q)
        np.testing.assert_allclose(dot(grad, q), 0.0, atol=1e-12)
        np.testing.assert_allclose(fd, dot(grad, mul(pure(u), q)), atol=1e-8)

    def test_gradient_correspondence_through_dphi(self):
        """A function of Phi(q) has tangential gradient v q with v_i = <dPhi(q, e_i), B>"""
        eps = 1e-5
        q, u = self.q[:2000], self.u[:2000]
        B0 = self.rng.standard_normal((2000, 3, 3))
        f = lambda x: matrix_dot(to_matrix(x), B0)
        basis = np.eye(3)
        v = np.stack([matrix_dot(dphi(q, np.tile(basis[i], (2000, 1))), B0) for i in range(3)], axis=1)
        grad = mul(pure(v), q)
        fd = (f(mul(exp_map(eps * u), q)) - f(mul(exp_map(-eps * u), q))) / (2.0 * eps)
        np.testing.assert_allclose(dot(grad, q), 0.0, atol=1e-12)
        np.testing.assert_allclose(fd, matrix_dot(dphi(q, u), B0), atol=1e-8)
        np.testing.assert_allclose(fd, dot(grad, mul(pure(u), q)), atol=1e-8)

    def test_rel_derivative_along_exponential_path(self):
        """On q(t) = exp(t b) q0 the relative derivative is b"""
        h, t0 = 1e-5, 0.7
        b, q0 = self.u[:2000], self.q[:2000]
        path = lambda t: mul(exp_map(t * b), q0)
        dq = (path(t0 + h) - path(t0 - h)) / (2.0 * h)
        np.testing.assert_allclose(rel_derivative(dq, path(t0)), b, atol=1e-8)

    def test_rel_derivative_precondition(self):
        """A direction with a radial part is rejected"""
        with self.assertRaises(PreconditionError):
            rel_derivative(self.q[0], self.q[0])


class TestVolumeCorrespondence(TestQuaternionBase):
    """Monte-Carlo integration over the unit quaternions and the SO(3) average"""

    def test_total_volume(self):
        """The unit quaternions have volume 2 pi^2"""
        value, err = mc_integral(lambda q: np.ones(len(q)), 1000, self.rng)
        self.assertAlmostEqual(value, H1_VOLUME, places=12)
        self.assertEqual(err, 0.0)

    def test_zero_samples_rejected(self):
        """mc_integral needs at least one sample"""
        with self.assertRaises(ValueError):
            mc_integral(lambda q: np.ones(len(q)), 0, self.rng)

    def test_angle_decomposition(self):
        """Functions of Re q integrate as 2 pi int sin^2(theta/2) f(cos(theta/2)) dtheta"""
        f = lambda w: w ** 2 + np.cos(3.0 * w)
        exact = 2.0 * np.pi * composite_gauss_legendre(
            lambda t: np.sin(0.5 * t) ** 2 * f(np.cos(0.5 * t)), 0.0, 2.0 * np.pi)
        value, err = mc_integral(lambda q: f(q[:, 0]), 1000000, self.rng)
        self.assertLess(abs(value - exact), 3.0 * err)

    def test_second_moment_of_real_part(self):
        """The uniform mean of (Re q)^2 is 1/4"""
        exact = 2.0 * np.pi * composite_gauss_legendre(
            lambda t: np.sin(0.5 * t) ** 2 * np.cos(0.5 * t) ** 2, 0.0, 2.0 * np.pi)
        self.assertAlmostEqual(exact / H1_VOLUME, 0.25, places=12)

    def test_haar_moments(self):
        """The SO(3) average of Tr(A)^k is 0, 1, 1 for k = 1, 2, 3"""
        for k, expected in ((1, 0.0), (2, 1.0), (3, 1.0)):
            value = so3_average(lambda A: np.trace(A, axis1=-2, axis2=-1) ** k)
            self.assertAlmostEqual(value, expected, places=8)

    def test_quaternion_side_matches_matrix_side(self):
        """mc_integral(g o Phi) / 2 pi^2 agrees with the SO(3) average"""
        for k in (1, 2, 3):
            g = lambda A: np.trace(A, axis1=-2, axis2=-1) ** k
            value, err = mc_integral(lambda q: g(to_matrix(q)), 1000000, self.rng)
            self.assertLess(abs(value / H1_VOLUME - so3_average(g)), 3.0 * err / H1_VOLUME)


if __name__ == '__main__':
    # Create test suite
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    # Add all test classes
    test_classes = [
        TestQuaternionAlgebra,
        TestAxisAngle,
        TestRotationMorphism,
        TestTangentCalculus,
        TestVolumeCorrespondence,
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
