import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.linalg import aslinearoperator

from specbound.errors import ConvergenceError, DegenerateInputError, InputError, UsageError
from specbound.tensor import Rng, child_seed, matrix_norm, spectral_norm, stable_rank


def jacobi_eigenvalues(a, sweeps=60):
    """Cyclic Jacobi rotations on a symmetric matrix (oracle, no LAPACK)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < 1e-15 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return np.diag(a)


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(3)) == pytest.approx(1.0, rel=1e-12)

    def test_diagonal(self):
        assert spectral_norm(np.diag([1.0, -2.0, 3.0])) == pytest.approx(3.0, rel=1e-9)

    def test_gaussian_8x5_against_jacobi_oracle(self):
        m = Rng(11).normal((8, 5))
        oracle = np.sqrt(np.max(jacobi_eigenvalues(m.T @ m)))
        assert spectral_norm(m, tol=1e-14, max_iter=100_000) == pytest.approx(oracle, rel=1e-8)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 4))) == 0.0

    def test_start_vector_in_null_space_reseeds(self):
        # all-ones start vector is annihilated by this matrix
        m = np.array([[1.0, -1.0], [2.0, -2.0]])
        assert spectral_norm(m, tol=1e-14) == pytest.approx(np.sqrt(10.0), rel=1e-10)

    def test_deterministic(self):
        m = Rng(3).normal((20, 7))
        assert spectral_norm(m) == spectral_norm(m.copy())

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            spectral_norm(np.array([[1.0, np.nan]]))

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            spectral_norm(np.zeros((0, 3)))

    def test_bad_tol(self):
        with pytest.raises(UsageError):
            spectral_norm(np.eye(2), tol=0.0)

    def test_convergence_error_carries_iterate(self):
        # two nearly equal top singular values converge slowly
        m = np.diag([1.0, 0.999999, 0.5])
        m[0, 1] = 1e-3
        with pytest.raises(ConvergenceError) as info:
            spectral_norm(m, tol=1e-16, max_iter=3)
        assert info.value.last_iterate.shape == (3,)

    def test_sparse_and_operator_inputs(self):
        m = Rng(5).normal((30, 12))
        m[np.abs(m) < 1.0] = 0.0
        dense = spectral_norm(m, tol=1e-13, max_iter=100_000)
        assert spectral_norm(scipy.sparse.csr_matrix(m), tol=1e-13, max_iter=100_000) == pytest.approx(dense, rel=1e-10)
        assert spectral_norm(aslinearoperator(m), tol=1e-13, max_iter=100_000) == pytest.approx(dense, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(-50, 50).filter(lambda x: abs(x) > 1e-3))
    def test_homogeneity(self, seed, c):
        m = Rng(seed).normal((6, 4))
        a = spectral_norm(c * m, tol=1e-14, max_iter=200_000)
        b = abs(c) * spectral_norm(m, tol=1e-14, max_iter=200_000)
        assert a == pytest.approx(b, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 9), c=st.integers(1, 9))
    def test_transpose_invariance(self, seed, r, c):
        m = Rng(seed).normal((r, c))
        s1 = spectral_norm(m, tol=1e-13, max_iter=200_000)
        s2 = spectral_norm(m.T, tol=1e-13, max_iter=200_000)
        assert s1 == pytest.approx(s2, rel=1e-9)


class TestMatrixNorm:
    def test_frobenius(self):
        assert matrix_norm([[3, 4], [0, 0]], "frobenius") == 5.0

    def test_two_one(self):
        assert matrix_norm([[3, 0], [4, 0]], "two_one") == 5.0

    def test_one_inf(self):
        assert matrix_norm([[1, -2], [3, 0]], "one_inf") == 4.0

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            matrix_norm(np.eye(2), "nuclear")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 8), c=st.integers(1, 8))
    def test_frobenius_dominates_spectral(self, seed, r, c):
        m = Rng(seed).normal((r, c))
        assert matrix_norm(m) >= spectral_norm(m, tol=1e-12, max_iter=100_000) * (1 - 1e-9)


class TestStableRank:
    def test_identity(self):
        assert stable_rank(np.eye(4)) == pytest.approx(4.0, rel=1e-12)

    def test_rank_one(self):
        u, v = np.array([1.0, 2.0, -1.0]), np.array([0.5, 3.0])
        assert stable_rank(np.outer(u, v)) == pytest.approx(1.0, rel=1e-10)

    def test_gaussian_against_svd_oracle(self):
        m = Rng(6).normal((6, 6))
        sv = np.linalg.svd(m, compute_uv=False)
        assert stable_rank(m) == pytest.approx(np.sum(sv**2) / sv[0] ** 2, rel=1e-6)

    def test_zero_matrix(self):
        with pytest.raises(DegenerateInputError):
            stable_rank(np.zeros((3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_at_least_one(self, seed):
        assert stable_rank(Rng(seed).normal((5, 3))) >= 1.0 - 1e-9


class TestRng:
    def test_identical_streams(self):
        a = Rng(2024).normal(1_000_000)
        b = Rng(2024).normal(1_000_000)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal(10), Rng(2).normal(10))

    def test_children_are_deterministic_and_distinct(self):
        r = Rng(9)
        assert np.array_equal(r.child(3).normal(5), Rng(9).child(3).normal(5))
        assert not np.array_equal(r.child(3).normal(5), r.child(4).normal(5))
        assert child_seed(9, 3) == child_seed(9, 3) != child_seed(9, 4)

    def test_scale_and_moments(self):
        x = Rng(0).normal(200_000, scale=2.0)
        assert abs(x.mean()) < 0.02
        assert x.std() == pytest.approx(2.0, rel=0.01)

    def test_uniform_range(self):
        x = Rng(0).uniform(-1.0, 1.0, 10_000)
        assert x.min() >= -1.0 and x.max() < 1.0
