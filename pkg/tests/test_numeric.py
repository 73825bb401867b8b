import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onestep.errors import DidNotConverge, LengthMismatch, NonSymmetric, SingularAfterDamping
from onestep.numeric import check_symmetric, conjugate_gradient, dot, solve_damped, spectral_norm
from reference import fsum_dot


def random_spd(rng, n, shift=1e-2):
    A = rng.standard_normal((n, n))
    return A @ A.T + shift * np.eye(n)


class TestSolveDamped:
    def test_identity(self):
        np.testing.assert_allclose(solve_damped(np.eye(3), [1.0, 2.0, 3.0], 0.0), [1, 2, 3])

    def test_pure_damping(self):
        np.testing.assert_allclose(solve_damped(np.zeros((2, 2)), [4.0, 6.0], 2.0), [2, 3])

    def test_random_spd_against_cholesky(self, rng):
        import scipy.linalg

        A = random_spd(rng, 10)
        b = rng.standard_normal(10)
        x = solve_damped(A, b, 1e-3)
        ref = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A + 1e-3 * np.eye(10)), b)
        np.testing.assert_allclose(x, ref, rtol=1e-9, atol=1e-12)
        assert np.linalg.norm((A + 1e-3 * np.eye(10)) @ x - b) <= 1e-8 * max(1, np.linalg.norm(b))

    def test_rejects_asymmetric(self):
        with pytest.raises(NonSymmetric):
            solve_damped(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0, 1.0], 0.0)

    def test_tiny_asymmetry_tolerated(self):
        A = np.eye(2)
        A[0, 1] = 1e-12
        check_symmetric(A)

    def test_singular(self):
        with pytest.raises(SingularAfterDamping):
            solve_damped(np.zeros((2, 2)), [1.0, 1.0], 0.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            solve_damped(np.eye(3), [1.0, 2.0], 0.0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 64), seed=st.integers(0, 2**31 - 1), damping=st.floats(0.0, 1.0))
    def test_reconstructs_b(self, n, seed, damping):
        rng = np.random.default_rng(seed)
        A = random_spd(rng, n)
        b = rng.standard_normal(n)
        x = solve_damped(A, b, damping)
        resid = np.linalg.norm((A + damping * np.eye(n)) @ x - b)
        assert resid <= 1e-8 * max(1.0, np.linalg.norm(b))


class TestConjugateGradient:
    def test_matches_direct(self, rng):
        A = random_spd(rng, 30, shift=1.0)
        b = rng.standard_normal(30)
        x = conjugate_gradient(lambda v: A @ v, b, damping=0.5, tol=1e-12)
        np.testing.assert_allclose(x, np.linalg.solve(A + 0.5 * np.eye(30), b), rtol=1e-8)


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(5)) == pytest.approx(1.0, rel=1e-12)

    def test_diagonal(self):
        assert spectral_norm(np.diag([1.0, 2.0, 7.0])) == pytest.approx(7.0, rel=1e-8)

    def test_negative_dominant(self):
        assert spectral_norm(np.diag([-9.0, 2.0, 7.0])) == pytest.approx(9.0, rel=1e-8)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    def test_random_symmetric_against_eigh(self, rng):
        A = rng.standard_normal((20, 20))
        A = A + A.T
        ref = np.max(np.abs(np.linalg.eigvalsh(A)))
        assert spectral_norm(A, tol=1e-10) == pytest.approx(ref, rel=1e-8)

    @pytest.mark.parametrize("c", [-2.0, 0.5])
    def test_homogeneous(self, rng, c):
        A = rng.standard_normal((12, 12))
        A = A + A.T
        np.testing.assert_allclose(spectral_norm(c * A, tol=1e-10), abs(c) * spectral_norm(A, tol=1e-10), rtol=1e-8)

    def test_did_not_converge(self):
        # equal-magnitude eigenvalues of opposite sign keep the iterate oscillating
        with pytest.raises(DidNotConverge):
            spectral_norm(np.diag([1.0, -1.0 + 1e-3]), tol=1e-14, max_iters=3)


class TestDot:
    def test_orthogonal(self):
        assert dot([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_square(self):
        assert dot([3.0, 4.0], [3.0, 4.0]) == 25.0

    def test_random_against_compensated(self, rng):
        u, v = rng.standard_normal(1000), rng.standard_normal(1000)
        ref = fsum_dot(u, v)
        assert abs(dot(u, v) - ref) <= 1e-12 * max(abs(ref), math.sqrt(fsum_dot(u * u, v * v)))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            dot([1.0], [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 200), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_symmetric_bilinear(self, seed, n, a, b):
        rng = np.random.default_rng(seed)
        u, v, w = rng.standard_normal((3, n))
        scale = np.linalg.norm(u) * (abs(a) * np.linalg.norm(v) + abs(b) * np.linalg.norm(w)) + 1e-300
        assert abs(dot(u, v) - dot(v, u)) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(v)
        assert abs(dot(u, a * v + b * w) - (a * dot(u, v) + b * dot(u, w))) <= 1e-12 * scale * 10
