"""Dense linear algebra and seeded randomness for small matrices.

Everything downstream (training, merging, trust metrics) runs on plain
float64 numpy arrays. This module supplies the handful of numerical
primitives the rest of the package needs: validated matrix products, a
cyclic Jacobi eigensolver, a PSD matrix square root, Gaussian moment
fitting/sampling, and a fully pinned deterministic random generator.

The generator is pinned on purpose: a 64-bit seed expanded through
splitmix64 initialises an xoshiro256** state, uniforms take the top 53
bits of each output word, and normals come from the Box-Muller transform.
The integer stream is identical on every platform; float transforms use
IEEE-754 double arithmetic throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# A Matrix is a 2-D float64 ndarray (row-major). Vectors are 1-D arrays.
Matrix = np.ndarray

PSD_TOL = 1e-8
SYM_TOL = 1e-10

_U64 = (1 << 64) - 1


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine fails to reach its tolerance."""


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D float64 array, raising on bad input."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_vector(values, name: str = "vector") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (advanced state, output)."""
    x = (x + _SPLITMIX_GAMMA) & _U64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return x, z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash (also used for prompt trigram bucketing)."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _U64
    return h


class SeededRng:
    """Deterministic xoshiro256** stream seeded via splitmix64.

    Identical seeds produce identical streams on every platform. The
    exact constructions are pinned so fixtures stay valid:

    - state: four consecutive splitmix64 outputs of the seed
    - ``next_u64``: the xoshiro256** update
    - ``uniform``: ``(word >> 11) * 2**-53`` in [0, 1)
    - ``normals``: Box-Muller on word pairs, with the first uniform
      shifted into (0, 1] via ``((word >> 11) + 1) * 2**-53``; outputs
      are interleaved (r*cos, r*sin) and odd requests drop the last sin
    - ``randbelow``: rejection sampling on the 64-bit word (no modulo bias)

    A SeededRng is single-owner state: never share one across threads.
    Independent streams come from :meth:`child`.
    """

    def __init__(self, seed: int):
        self.seed = seed & _U64
        x = self.seed
        state = []
        for _ in range(4):
            x, word = _splitmix64(x)
            state.append(word)
        self._s = state

    def next_u64(self) -> int:
        return self._block(1)[0]

    def _block(self, n: int) -> list[int]:
        """Fill ``n`` output words; the hot loop is kept local for speed."""
        s0, s1, s2, s3 = self._s
        out = []
        append = out.append
        for _ in range(n):
            append((((((s1 * 5) & _U64) << 7 | ((s1 * 5) & _U64) >> 57) & _U64) * 9) & _U64)
            t = (s1 << 17) & _U64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _U64
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normal draws as a float64 array."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        if n == 0:
            return np.empty(0)
        pairs = (n + 1) // 2
        words = self._block(2 * pairs)
        u1 = (np.array([w >> 11 for w in words[0::2]], dtype=np.float64) + 1.0) * 2.0**-53
        u2 = np.array([w >> 11 for w in words[1::2]], dtype=np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        span = _U64 + 1
        limit = span - (span % n)
        while True:
            word = self.next_u64()
            if word < limit:
                return word % n

    def child(self, label: str) -> "SeededRng":
        """Derive an independent stream keyed by a label.

        The child seed is ``splitmix64(seed ^ fnv1a64(label))``, so forks
        are reproducible and order-independent.
        """
        _, mixed = _splitmix64(self.seed ^ fnv1a64(label.encode("utf-8")))
        return SeededRng(mixed)


# ---------------------------------------------------------------------------
# Matrix operations
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with shape validation and a finiteness check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}: inner dimensions differ")
    out = a @ b
    if not np.isfinite(out).all():
        raise ValueError("matrix product produced non-finite entries")
    return out


def _check_symmetric(m: Matrix, name: str) -> None:
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    scale = max(1.0, float(np.abs(m).max())) if m.size else 1.0
    if asym > SYM_TOL * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3e})")


def _offdiag_norm(a: Matrix) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt((off * off).sum()))


def sym_eig(m: Matrix, *, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, Matrix]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matrix whose columns
    are the matching eigenvectors. Sweeps stop once the off-diagonal
    Frobenius norm drops below ``tol``; failure to converge within
    ``max_sweeps`` raises :class:`ConvergenceError` with the residual.
    Eigenvector signs are normalised so the largest-magnitude component
    of each column is positive.
    """
    a = as_matrix(m, "matrix")
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    _check_symmetric(a, "matrix")

    a = a.copy()
    v = np.eye(n)
    for sweep in range(max_sweeps + 1):
        off = _offdiag_norm(a)
        if off < tol:
            break
        if sweep == max_sweeps:
            raise ConvergenceError(
                f"Jacobi sweep limit {max_sweeps} reached with off-diagonal residual {off:.3e}"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, q] = 0.0
                a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vectors = v[:, order]
    for j in range(n):
        pivot = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[pivot, j] < 0.0:
            vectors[:, j] = -vectors[:, j]
    return eigenvalues, vectors


def sqrtm_psd(m: Matrix) -> Matrix:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-PSD_TOL, 0) are clamped to zero; anything more
    negative is rejected as not positive semidefinite.
    """
    eigenvalues, vectors = sym_eig(m)
    smallest = float(eigenvalues.min()) if eigenvalues.size else 0.0
    if smallest < -PSD_TOL:
        raise ValueError(f"matrix is not PSD: eigenvalue {smallest:.6e}")
    clamped = np.clip(eigenvalues, 0.0, None)
    root = (vectors * np.sqrt(clamped)) @ vectors.T
    return 0.5 * (root + root.T)


# ---------------------------------------------------------------------------
# Gaussian moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    """First and second moments of a sample cloud.

    The covariance is symmetrised on construction and must have no
    eigenvalue below -PSD_TOL; mildly negative eigenvalues (rank-deficient
    sample covariances) are tolerated and clamped by consumers.
    """

    mean: np.ndarray
    cov: Matrix

    def __post_init__(self):
        mean = as_vector(self.mean, "mean")
        cov = as_matrix(self.cov, "cov")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        cov = 0.5 * (cov + cov.T)
        smallest = float(sym_eig(cov)[0].min())
        if smallest < -PSD_TOL:
            raise ValueError(f"covariance is not PSD: eigenvalue {smallest:.6e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_fit(samples: Matrix) -> GaussianStats:
    """Column means and unbiased (n-1 divisor) sample covariance."""
    x = as_matrix(samples, "samples")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit moments, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mean, cov)


def mvn_sample(stats: GaussianStats, n: int, rng: SeededRng) -> Matrix:
    """Draw ``n`` samples from N(mean, cov) as mean + L @ xi.

    L is the symmetric PSD square root of the covariance, so degenerate
    (zero-eigenvalue) directions are allowed. Draws are deterministic
    under the rng: normals are consumed row-major, one row per sample.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    factor = sqrtm_psd(stats.cov)
    xi = rng.normals(n * stats.dim).reshape(n, stats.dim)
    return stats.mean + xi @ factor
