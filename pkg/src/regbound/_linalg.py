"""Small dense linear-algebra helpers used by the bound and estimator code."""

from __future__ import annotations

import numpy as np
from scipy import linalg

COND_LIMIT = 1e12


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def scaled_condition(M):
    """Condition number of ``M`` after symmetric diagonal (Jacobi) scaling.

    Parameters mix units (dimensionless matrix entries and nanometre offsets),
    so the raw condition number mostly measures unit choice. Scaling to unit
    diagonal removes that and leaves the identifiability part.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    diag = np.diag(M)
    if np.any(diag <= 0) or not np.all(np.isfinite(M)):
        return np.inf
    scale = 1.0 / np.sqrt(diag)
    eig = np.linalg.eigvalsh(M * scale[:, None] * scale[None, :])
    if eig[0] <= 0:
        return np.inf
    return float(eig[-1] / eig[0])


def spd_inverse(M, *, cond_limit=COND_LIMIT, error=ArithmeticError, what="matrix"):
    """Invert a symmetric positive-definite matrix with a conditioning guard.

    Returns ``(inverse, condition)``; raises ``error(message, ...)`` when the
    Jacobi-scaled condition number exceeds ``cond_limit`` or the Cholesky
    factorisation fails.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    cond = scaled_condition(M)
    if not cond <= cond_limit:
        raise _make(error, f"{what} is singular or ill-conditioned (scaled cond={cond:.3g})", cond)
    scale = 1.0 / np.sqrt(np.diag(M))
    Ms = M * scale[:, None] * scale[None, :]
    try:
        factor = linalg.cho_factor(Ms, lower=True)
    except linalg.LinAlgError as exc:
        raise _make(error, f"{what} is not positive definite", cond) from exc
    inv = linalg.cho_solve(factor, np.eye(M.shape[0]))
    inv = inv * scale[:, None] * scale[None, :]
    return symmetrize(inv), cond


def _make(error, message, cond):
    try:
        return error(message, cond)
    except TypeError:
        return error(message)


def is_spd(M, rel_tol=1e-12):
    """True when ``M`` is symmetric with smallest eigenvalue > rel_tol * largest."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        return False
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * np.max(np.abs(M), initial=0.0)):
        return False
    eig = np.linalg.eigvalsh(symmetrize(M))
    return bool(eig[-1] > 0 and eig[0] > rel_tol * eig[-1])


def batched_inv_spd(M):
    """Inverse of a stack of small SPD matrices, shape (..., d, d)."""
    return symmetrize(np.linalg.inv(M))
