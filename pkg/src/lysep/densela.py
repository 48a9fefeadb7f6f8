"""Dense linear algebra used by every alternating update.

Matrices are plain ``float64`` numpy arrays. The two least-squares solves
below are the only linear systems the training algorithms need: a
(generalized) ridge problem in a row-matrix unknown and a column mean.
"""

import numpy as np
import scipy.linalg


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def as_mat(a, name="matrix"):
    """Return ``a`` as a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def matmul(a, b):
    """Matrix product with an explicit shape check (no broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def frob_norm(a):
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def frob_norm2(a):
    """Squared Frobenius norm, computed without the square root round trip."""
    a = np.asarray(a, dtype=np.float64).ravel()
    return float(a @ a)


def lstsq_right(v, b, lam=0.0):
    """Solve ``min_W ||W v - b||_F^2 + lam ||W||_F^2``.

    ``v`` is k x N and ``b`` is m x N; the result is m x k. The problem is
    solved as the stacked least-squares system ``[v^T; sqrt(lam) I] W^T =
    [b^T; 0]`` through an orthogonal (SVD-based) LAPACK driver, which also
    returns the minimum-norm minimizer when the design is rank deficient.
    """
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if v.ndim != 2 or b.ndim != 2:
        raise ShapeError("lstsq_right expects 2-D v and b")
    if v.shape[1] != b.shape[1]:
        raise ShapeError(f"v has {v.shape[1]} columns but b has {b.shape[1]}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    k = v.shape[0]
    if lam > 0:
        design = np.vstack([v.T, np.sqrt(lam) * np.eye(k)])
        rhs = np.vstack([b.T, np.zeros((k, b.shape[0]))])
    else:
        design, rhs = v.T, b.T
    sol = scipy.linalg.lstsq(design, rhs, lapack_driver="gelsd", check_finite=False)[0]
    return np.ascontiguousarray(sol.T)


def lstsq_right_reg(v, b, g, lam):
    """Solve ``min_W ||W v - b||_F^2 + lam ||W g||_F^2`` (g: k x r).

    Generalizes :func:`lstsq_right` to a regularizer seen through a fixed
    matrix ``g``; with ``g = I`` the two coincide.
    """
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g.toarray() if hasattr(g, "toarray") else g, dtype=np.float64)
    if v.shape[1] != b.shape[1] or g.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible shapes v={v.shape} b={b.shape} g={g.shape}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return lstsq_right(v, b, 0.0)
    design = np.vstack([v.T, np.sqrt(lam) * g.T])
    rhs = np.vstack([b.T, np.zeros((g.shape[1], b.shape[0]))])
    sol = scipy.linalg.lstsq(design, rhs, lapack_driver="gelsd", check_finite=False)[0]
    return np.ascontiguousarray(sol.T)


def col_mean_solve(r):
    """Least-squares ``b`` for ``b 1^T = r``: the mean of the columns of ``r``."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.size == 0:
        raise ShapeError("col_mean_solve expects a non-empty 2-D array")
    return r.mean(axis=1, keepdims=True)
