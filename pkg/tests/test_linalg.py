"""Matrix primitives against independent oracles.

Ground truths: a naive triple-loop product, numpy.linalg.eigh, hand-derived
2x2 eigensystems, cofactor-expansion determinants, and squaring/round-trip
identities.
"""

import numpy as np
import pytest

from hers.linalg import (
    ConvergenceError,
    GaussianStats,
    SeededRng,
    fnv1a64,
    gaussian_fit,
    matmul,
    mvn_sample,
    sqrtm_psd,
    sym_eig,
)

# Pinned stream for seed 42: splitmix64-seeded xoshiro256**.
SEED42_U64 = [
    1546998764402558742,
    6990951692964543102,
    12544586762248559009,
    17057574109182124193,
    18295552978065317476,
    14199186830065750584,
    13267978908934200754,
    15679888225317814407,
    14044878350692344958,
    10760895422300929085,
]


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def det_cofactor(m):
    n = m.shape[0]
    if n == 1:
        return m[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(m, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * m[0, j] * det_cofactor(minor)
    return total


class TestRng:
    def test_pinned_u64_stream(self):
        rng = SeededRng(42)
        assert [rng.next_u64() for _ in range(10)] == SEED42_U64

    def test_same_seed_same_normals(self):
        a = SeededRng(123).normals(50)
        b = SeededRng(123).normals(50)
        assert np.array_equal(a, b)

    def test_child_streams_differ(self):
        base = SeededRng(5)
        assert base.child("x").next_u64() != base.child("y").next_u64()
        assert SeededRng(5).child("x").next_u64() == SeededRng(5).child("x").next_u64()

    def test_uniform_in_range(self):
        rng = SeededRng(9)
        draws = [rng.uniform() for _ in range(1000)]
        assert all(0.0 <= u < 1.0 for u in draws)

    def test_randbelow_unbiased_support(self):
        rng = SeededRng(11)
        seen = {rng.randbelow(7) for _ in range(500)}
        assert seen == set(range(7))

    def test_fnv1a64_reference_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestMatmul:
    def test_identity(self):
        m = np.array([[3.0, -1.0], [2.0, 5.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_orthogonal_projectors(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(matmul(a, b), np.zeros((2, 2)))

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(5, 7\).*\(3, 3\)"):
            matmul(np.zeros((5, 7)), np.zeros((3, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((4, 6))
            b = rng.standard_normal((6, 3))
            c = rng.standard_normal((3, 5))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)

    def test_rejects_nonfinite(self):
        bad = np.array([[1.0, np.inf], [0.0, 1.0]])
        with pytest.raises(ValueError, match="non-finite"):
            matmul(bad, np.eye(2))


class TestSymEig:
    def test_already_diagonal(self):
        w, v = sym_eig(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(w, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(v), np.eye(2), atol=1e-12)

    def test_hand_derived_2x2(self):
        # char poly of [[2,1],[1,2]]: (2-l)^2 - 1 = 0 -> l = 3, 1
        w, v = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)
        s = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(np.abs(v[:, 0]), [s, s], atol=1e-12)
        np.testing.assert_allclose(np.abs(v[:, 1]), [s, s], atol=1e-12)
        assert np.sign(v[0, 1]) != np.sign(v[1, 1])

    def test_reconstruction_random_8x8(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((8, 8))
        m = a + a.T
        w, v = sym_eig(m)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, m, atol=1e-8 * np.linalg.norm(m))
        np.testing.assert_allclose(v.T @ v, np.eye(8), atol=1e-8)
        assert all(w[i] >= w[i + 1] for i in range(7))

    def test_matches_numpy(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 5, 12):
            a = rng.standard_normal((n, n))
            m = a @ a.T
            w, _ = sym_eig(m)
            np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-8)

    def test_trace_and_determinant_invariants(self):
        rng = np.random.default_rng(4)
        for n in (2, 3, 4):
            a = rng.standard_normal((n, n))
            m = a + a.T
            w, _ = sym_eig(m)
            assert abs(w.sum() - np.trace(m)) < 1e-9 * max(1.0, abs(np.trace(m)))
            det = det_cofactor(m)
            assert abs(np.prod(w) - det) < 1e-8 * max(1.0, abs(det))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="not symmetric"):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError, match="square"):
            sym_eig(np.zeros((2, 3)))

    def test_nonconvergence_reports_residual(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        with pytest.raises(ConvergenceError, match="residual"):
            sym_eig(m, max_sweeps=0)


class TestSqrtmPsd:
    def test_identity(self):
        np.testing.assert_allclose(sqrtm_psd(np.eye(3)), np.eye(3), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_squaring_oracle_random_psd(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((6, 6))
        psd = m.T @ m
        root = sqrtm_psd(psd)
        np.testing.assert_allclose(root @ root, psd, atol=1e-7 * (1.0 + np.linalg.norm(psd)))
        np.testing.assert_allclose(root, root.T, atol=1e-12)

    def test_idempotence(self):
        rng = np.random.default_rng(6)
        m = rng.standard_normal((5, 5))
        s = sqrtm_psd(m.T @ m)
        np.testing.assert_allclose(sqrtm_psd(s @ s), s, atol=1e-6)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="not PSD"):
            sqrtm_psd(np.diag([1.0, -0.5]))


class TestGaussianMoments:
    def test_two_point_hand_case(self):
        stats = gaussian_fit(np.array([[0.0, 0.0], [2.0, 0.0]]))
        np.testing.assert_allclose(stats.mean, [1.0, 0.0])
        np.testing.assert_allclose(stats.cov, [[2.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_identical_samples_zero_cov(self):
        stats = gaussian_fit(np.tile([1.5, -2.0, 3.0], (7, 1)))
        np.testing.assert_allclose(stats.cov, np.zeros((3, 3)), atol=1e-15)

    def test_standard_normal_large_sample(self):
        draws = SeededRng(2024).normals(10_000 * 3).reshape(10_000, 3)
        stats = gaussian_fit(draws)
        assert np.abs(stats.mean).max() < 0.05
        assert np.abs(stats.cov - np.eye(3)).max() < 0.1

    def test_requires_two_samples(self):
        with pytest.raises(ValueError, match="at least 2"):
            gaussian_fit(np.array([[1.0, 2.0]]))

    def test_stats_validation(self):
        with pytest.raises(ValueError, match="not PSD"):
            GaussianStats(np.zeros(2), np.diag([1.0, -1.0]))


class TestMvnSample:
    def test_degenerate_cov_returns_mean(self):
        stats = GaussianStats(np.array([3.0, -1.0]), np.zeros((2, 2)))
        draws = mvn_sample(stats, 5, SeededRng(1))
        assert np.array_equal(draws, np.tile(stats.mean, (5, 1)))

    def test_deterministic_under_seed(self):
        stats = GaussianStats(np.zeros(3), np.eye(3))
        assert np.array_equal(mvn_sample(stats, 10, SeededRng(4)), mvn_sample(stats, 10, SeededRng(4)))

    def test_moment_round_trip(self):
        cov = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
        stats = GaussianStats(np.array([1.0, -2.0, 0.5]), cov)
        fit = gaussian_fit(mvn_sample(stats, 20_000, SeededRng(7)))
        rel = np.linalg.norm(fit.cov - stats.cov) / np.linalg.norm(stats.cov)
        assert rel < 0.05
        assert np.abs(fit.mean - stats.mean).max() < 0.05
