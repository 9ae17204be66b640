"""Small dense linear-algebra kernel and seeded randomness.

Matrices are plain 2-d float64 numpy arrays. Everything here is pure; inputs
are never modified.
"""
import numpy as np
from scipy.linalg import lapack


class ShapeError(ValueError):
    def __init__(self, a_shape, b_shape, what="matmul"):
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{what}: incompatible shapes {self.a_shape} and {self.b_shape}")


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (non-positive pivot at index {pivot})")


class NotSymmetric(ValueError):
    pass


def make_rng(seed):
    """PCG64 generator; identical streams for identical seeds on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d array, got ndim={a.ndim}")
    return a


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(a.shape, b.shape)
    return a @ b


def cholesky(a):
    """Lower Cholesky factor. Raises NotPositiveDefinite with the 0-based failing pivot."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(a.shape, a.shape, "cholesky")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def solve_spd(a, b):
    """Solve a @ x = b for symmetric positive definite a via Cholesky."""
    a = as_matrix(a)
    b_arr = np.asarray(b, dtype=np.float64)
    vec = b_arr.ndim == 1
    b2 = as_matrix(b_arr)
    if a.shape[0] != a.shape[1] or a.shape[1] != b2.shape[0]:
        raise ShapeError(a.shape, b2.shape, "solve_spd")
    c = cholesky(a)
    x, info = lapack.dpotrs(c, b2, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x[:, 0] if vec else x


def sym_eig(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigensolver for symmetric matrices.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors stored as columns.
    """
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(a.shape, a.shape, "sym_eig")
    scale = max(1.0, np.abs(a).max()) if a.size else 1.0
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise NotSymmetric("sym_eig requires a symmetric matrix (asymmetry above 1e-10)")
    m = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(m, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q
                mp = m[:, p].copy()
                mq = m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                mp = m[p, :].copy()
                mq = m[q, :].copy()
                m[p, :] = c * mp - s * mq
                m[q, :] = s * mp + c * mq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(m).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def symmetrize(p):
    return 0.5 * (p + p.T)


def spectral_radius(a):
    a = as_matrix(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))
