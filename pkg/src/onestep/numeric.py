"""Dense double-precision linear algebra used throughout the package.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects of dtype float64.
"""

import logging
import warnings

import numpy as np
import scipy.linalg

from .errors import (
    DidNotConverge,
    LengthMismatch,
    NonSymmetric,
    SingularAfterDamping,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-8
RESIDUAL_TOL = 1e-8
DENSE_SOLVE_MAX_DIM = 4096
DEFAULT_DAMPING = 1e-3


def _as_matrix(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {A.shape}")
    return A


def check_symmetric(A, tol=SYMMETRY_TOL):
    A = _as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise NonSymmetric(f"matrix is not square: {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > tol * scale:
        raise NonSymmetric(f"asymmetry {asym:.3e} exceeds tolerance {tol:.1e}")
    return A


def dot(u, v):
    """Dot product with a fixed left-to-right accumulation order.

    ``np.dot`` hands the reduction to BLAS, whose summation order depends on
    vector length and CPU features. ``np.cumsum`` is strictly sequential, so
    the result here is reproducible bit for bit.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise LengthMismatch(f"lengths differ: {u.size} vs {v.size}")
    if u.size == 0:
        return 0.0
    return float(np.cumsum(u * v)[-1])


def conjugate_gradient(matvec, b, damping=0.0, tol=1e-10, max_iters=None, x0=None):
    """Solve ``(A + damping*I) x = b`` for symmetric positive definite ``A``.

    ``matvec`` computes ``A @ v``. Iteration stops once the residual norm
    drops below ``tol * max(1, ||b||)``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    if max_iters is None:
        max_iters = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - (matvec(x) + damping * x)
    p = r.copy()
    rs = float(r @ r)
    target = tol * max(1.0, float(np.linalg.norm(b)))
    for it in range(max_iters):
        if np.sqrt(rs) <= target:
            return x
        Ap = matvec(p) + damping * p
        curv = float(p @ Ap)
        if curv <= 0 or not np.isfinite(curv):
            raise SingularAfterDamping(
                f"non-positive curvature {curv:.3e} at CG iteration {it}"
            )
        alpha = rs / curv
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= target:
        return x
    raise DidNotConverge(
        f"CG residual {np.sqrt(rs):.3e} above {target:.3e} after {max_iters} iterations",
        grad_norm=float(np.sqrt(rs)),
        iterations=max_iters,
    )


def solve_damped(A, b, damping=0.0):
    """Return ``x`` solving ``(A + damping*I) x = b`` for symmetric ``A``.

    Dimensions up to 4096 use a dense symmetric factorization; larger systems
    fall back to conjugate gradients, which additionally needs the damped
    matrix to be positive definite.
    """
    A = check_symmetric(A)
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.size != A.shape[0]:
        raise LengthMismatch(f"rhs length {b.size} does not match matrix {A.shape}")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    n = A.shape[0]
    M = A + damping * np.eye(n) if damping else A
    if n <= DENSE_SOLVE_MAX_DIM:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                x = scipy.linalg.solve(M, b, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularAfterDamping(str(exc)) from exc
    else:
        x = conjugate_gradient(lambda v: A @ v, b, damping=damping, tol=RESIDUAL_TOL / 10)
    resid = float(np.linalg.norm(M @ x - b)) if np.all(np.isfinite(x)) else np.inf
    if resid > RESIDUAL_TOL * max(1.0, float(np.linalg.norm(b))):
        raise SingularAfterDamping(
            f"damped system is numerically singular (residual {resid:.3e})"
        )
    return x


def spectral_norm(A, tol=1e-8, max_iters=10_000, seed=0):
    """Largest absolute eigenvalue of a symmetric matrix by power iteration.

    The start vector is drawn from a fixed seed so the estimate is
    reproducible. Iteration stops when the relative change of ``||A x||``
    falls below ``tol / 100``; the iterates increase monotonically for
    symmetric ``A``, so the returned value never overshoots.
    """
    A = check_symmetric(A)
    n = A.shape[0]
    if n == 0 or not np.any(A):
        return 0.0
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    stop = max(tol * 1e-2, 4 * np.finfo(np.float64).eps)
    est = 0.0
    for it in range(max_iters):
        y = A @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            # start vector in the null space; restart from a fresh direction
            x = np.random.default_rng(seed + it + 1).standard_normal(n)
            x /= np.linalg.norm(x)
            continue
        if abs(new - est) <= stop * new:
            return new
        est = new
        x = y / new
    raise DidNotConverge(
        f"power iteration did not settle after {max_iters} iterations (estimate {est:.6g})",
        iterations=max_iters,
    )
