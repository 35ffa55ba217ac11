"""
Dense linear-algebra substrate.

Arrays are plain row-major ``numpy.float64`` arrays. The helpers here add the
contracts the rest of the package relies on: shape errors instead of silent
broadcasting, Cholesky failures that report the pivot, and a single seeded
counter-based generator (Philox) so every experiment replays bit-for-bit.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPDError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))


def as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def make_rng(seed):
    """Philox-backed generator; identical seed gives an identical stream on any platform."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def mat_mul(a, b):
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, rhs):
        """Return ``S^{-1} rhs`` for the factored matrix S; rhs is (d,) or (d, m)."""
        y = solve_triangular(self.lower, rhs, lower=True, check_finite=False)
        return solve_triangular(self.lower, y, lower=True, trans="T", check_finite=False)

    def reconstruct(self):
        return self.lower @ self.lower.T


def cholesky(s, sym_tol=1e-10):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPDError carrying the 0-based pivot where the factorization broke
    down. No regularization is attempted here.
    """
    s = as_f64(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ShapeError(f"cholesky needs a non-empty square matrix, got {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))))
    if np.max(np.abs(s - s.T)) > sym_tol * scale:
        raise ShapeError("matrix is not symmetric")
    d = s.shape[0]
    low = np.zeros_like(s)
    for j in range(d):
        piv = s[j, j] - low[j, :j] @ low[j, :j]
        if not piv > 0.0 or not np.isfinite(piv):
            raise NotPDError(j, float(piv))
        low[j, j] = np.sqrt(piv)
        if j + 1 < d:
            low[j + 1:, j] = (s[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return CholeskyFactor(low)


def mahalanobis_sq(v, mean, chol):
    """(v - mean)^T S^{-1} (v - mean) via one triangular solve.

    ``v`` may be a single vector (d,) or a batch (n, d); returns a float or (n,).
    """
    v = as_f64(v)
    mean = as_f64(mean)
    d = chol.dim
    if mean.shape != (d,) or v.shape[-1:] != (d,) or v.ndim > 2:
        raise ShapeError(f"dimension mismatch: v{v.shape}, mean{mean.shape}, chol {d}")
    diff = (v - mean).T
    y = solve_triangular(chol.lower, diff, lower=True, check_finite=False)
    out = np.sum(y * y, axis=0)
    return float(out) if v.ndim == 1 else out


def log_sum_exp(v, axis=-1):
    v = as_f64(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("log_sum_exp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(v, axis=-1):
    v = as_f64(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)
