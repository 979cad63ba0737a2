"""Maximum-likelihood fitting of the affine map under heteroscedastic EIV noise.

With known covariances the negative log-likelihood (up to constants) is::

    1/2 sum_k (y1k - x1k)^T W1k (y1k - x1k) + (y2k - A x1k - s)^T W2k (y2k - A x1k - s)

It is quadratic in the nuisance CP locations for fixed ``(A, s)`` and quadratic
in ``(A, s)`` for fixed CP locations, so ``fit_ml`` alternates between the two
exact minimisers. The batched variant ``fit_ml_batch`` runs many independent
problems that share one covariance model in lock-step; the Monte Carlo engine
uses it.
"""

# ruff: noqa: N806, N803
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from regbound._linalg import COND_LIMIT, scaled_condition
from regbound.errors import DegenerateDesign, NonConvergence
from regbound.fim import design_rows
from regbound.regmodel import CovarianceSpec, GeneralCovariance

__all__ = [
    "ObservedData",
    "FitOptions",
    "EstimateResult",
    "BatchEstimate",
    "RegistrationErrors",
    "neg_log_lik",
    "init_ls",
    "fit_ml",
    "fit_ml_batch",
    "register_feature",
    "tre",
    "lre",
    "registration_errors",
]


@dataclass(frozen=True)
class ObservedData:
    """Measured CP locations ``Y1``, ``Y2`` (each ``(d, K)``) and optional feature ``y1F``."""

    Y1: NDArray
    Y2: NDArray
    y1F: Optional[NDArray] = None

    def __post_init__(self):
        Y1 = np.array(self.Y1, dtype=float)
        Y2 = np.array(self.Y2, dtype=float)
        if Y1.ndim != 2 or Y1.shape != Y2.shape:
            raise ValueError(f"Y1 {Y1.shape} and Y2 {Y2.shape} must be equal (d, K) arrays")
        if not (np.all(np.isfinite(Y1)) and np.all(np.isfinite(Y2))):
            raise ValueError("observations must be finite")
        for a in (Y1, Y2):
            a.setflags(write=False)
        object.__setattr__(self, "Y1", Y1)
        object.__setattr__(self, "Y2", Y2)
        if self.y1F is not None:
            y = np.array(self.y1F, dtype=float)
            y.setflags(write=False)
            object.__setattr__(self, "y1F", y)

    @property
    def d(self) -> int:
        return self.Y1.shape[0]

    @property
    def K(self) -> int:
        return self.Y1.shape[1]


@dataclass(frozen=True)
class FitOptions:
    rtol: float = 1e-12
    max_iter: int = 500
    raise_on_nonconvergence: bool = True


@dataclass(frozen=True)
class EstimateResult:
    A_hat: NDArray
    s_hat: NDArray
    X1_hat: NDArray
    objective_trace: tuple
    iterations: int
    converged: bool

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


@dataclass(frozen=True)
class BatchEstimate:
    """Fits for ``R`` problems: ``A_hat`` is ``(R, d, d)``, ``s_hat`` ``(R, d)``, ``X1_hat`` ``(R, d, K)``."""

    A_hat: NDArray
    s_hat: NDArray
    X1_hat: NDArray
    objective: NDArray
    iterations: NDArray
    converged: NDArray


@dataclass(frozen=True)
class RegistrationErrors:
    tre: NDArray
    lre: Optional[NDArray] = None


def _weights(cov):
    gen = cov.expand() if not isinstance(cov, GeneralCovariance) else cov
    return np.linalg.inv(gen.omega1), np.linalg.inv(gen.omega2)


def _objective(Y1, Y2, W1, W2, A, s, X1):
    """Batched objective; ``Y*``/``X1`` ``(..., d, K)``, ``A`` ``(..., d, d)``, ``s`` ``(..., d)``."""
    r1 = np.swapaxes(Y1 - X1, -1, -2)[..., None]  # (..., K, d, 1)
    r2 = np.swapaxes(Y2 - A @ X1 - s[..., :, None], -1, -2)[..., None]
    q1 = (np.swapaxes(r1, -1, -2) @ W1 @ r1)[..., 0, 0]
    q2 = (np.swapaxes(r2, -1, -2) @ W2 @ r2)[..., 0, 0]
    return 0.5 * (q1.sum(axis=-1) + q2.sum(axis=-1))


def neg_log_lik(data: ObservedData, cov: CovarianceSpec, A, s, X1) -> float:
    """Negative log-likelihood without the constant and log-determinant terms."""
    W1, W2 = _weights(cov)
    if W1.shape[0] != data.K or W1.shape[1] != data.d:
        raise ValueError("covariance does not match the data dimensions")
    for W in (W1, W2):
        if not np.all(np.linalg.eigvalsh(0.5 * (W + np.swapaxes(W, -1, -2))) > 0):
            raise ValueError("covariance blocks must be positive definite")
    A = np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float)
    X1 = np.asarray(X1, dtype=float)
    return float(_objective(data.Y1, data.Y2, W1, W2, A, s, X1))


def init_ls(data: ObservedData):
    """Ordinary least-squares regression of ``Y2`` on ``[Y1; 1]``: returns ``(A0, s0)``."""
    A, s = _init_ls_batch(data.Y1[None], data.Y2[None])
    return A[0], s[0]


def _init_ls_batch(Y1, Y2):
    R, d, K = Y1.shape
    if K < d + 1:
        raise DegenerateDesign(f"need at least {d + 1} control points, got {K}")
    Z = np.concatenate([Y1, np.ones((R, 1, K))], axis=1)  # (R, d+1, K)
    ZZt = Z @ np.swapaxes(Z, -1, -2)
    centred = Y1 - Y1.mean(axis=-1, keepdims=True)
    scat = centred @ np.swapaxes(centred, -1, -2)
    for r in range(R):
        if scaled_condition(scat[r]) > COND_LIMIT:
            raise DegenerateDesign("control points in image 1 do not span the space")
    B = np.linalg.solve(ZZt, Z @ np.swapaxes(Y2, -1, -2))  # (R, d+1, d)
    Bt = np.swapaxes(B, -1, -2)  # (R, d, d+1)
    return Bt[..., :d].copy(), Bt[..., d].copy()


def _x_step(Y1, Y2, W1, W2, A, s):
    """Exact CP-location minimiser for fixed ``(A, s)``; returns ``(R, d, K)``."""
    At = np.swapaxes(A, -1, -2)[:, None]  # (R, 1, d, d)
    AtW2 = At @ W2[None]  # (R, K, d, d)
    P = W1[None] + AtW2 @ A[:, None]
    y1 = np.swapaxes(Y1, -1, -2)[..., None]  # (R, K, d, 1)
    y2s = np.swapaxes(Y2 - s[..., None], -1, -2)[..., None]
    rhs = W1[None] @ y1 + AtW2 @ y2s
    x = np.linalg.solve(P, rhs)[..., 0]  # (R, K, d)
    return np.swapaxes(x, -1, -2)


def _ts_step(Y2, W2, X1):
    """Exact ``(A, s)`` minimiser for fixed CP locations (weighted regression)."""
    R, d, K = X1.shape
    H = design_rows(X1)  # (R, K, d, p)
    HtW = np.swapaxes(H, -1, -2) @ W2[None]  # (R, K, p, d)
    N = (HtW @ H).sum(axis=1)
    y2 = np.swapaxes(Y2, -1, -2)[..., None]
    b = (HtW @ y2).sum(axis=1)[..., 0]
    theta = np.linalg.solve(N, b[..., None])[..., 0]
    return theta[:, : d * d].reshape(R, d, d), theta[:, d * d:], N


def fit_ml_batch(Y1, Y2, cov: CovarianceSpec, options: FitOptions = FitOptions()) -> BatchEstimate:
    """Alternating ML fit of ``R`` problems sharing one covariance model.

    ``Y1``, ``Y2`` have shape ``(R, d, K)``. Problems that have converged are
    frozen while the rest keep iterating. Non-convergence is reported in
    ``converged`` and never raised here.
    """
    Y1 = np.asarray(Y1, dtype=float)
    Y2 = np.asarray(Y2, dtype=float)
    R, d, K = Y1.shape
    W1, W2 = _weights(cov)
    if W1.shape[:2] != (K, d):
        raise ValueError("covariance does not match the data dimensions")
    A, s = _init_ls_batch(Y1, Y2)
    X1 = _x_step(Y1, Y2, W1, W2, A, s)
    f = _objective(Y1, Y2, W1, W2, A, s, X1)
    iters = np.zeros(R, dtype=int)
    done = np.zeros(R, dtype=bool)
    for it in range(1, options.max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        y1, y2 = Y1[act], Y2[act]
        A_n, s_n, N = _ts_step(y2, W2, X1[act])
        if it == 1:
            for r in range(act.size):
                if scaled_condition(N[r]) > COND_LIMIT:
                    raise DegenerateDesign("weighted regression normal matrix is singular")
        X_n = _x_step(y1, y2, W1, W2, A_n, s_n)
        f_n = _objective(y1, y2, W1, W2, A_n, s_n, X_n)
        f_old = f[act]
        improved = f_n <= f_old
        # a rise can only come from rounding: keep the previous iterate and stop
        upd = act[improved]
        A[upd], s[upd], X1[upd], f[upd] = A_n[improved], s_n[improved], X_n[improved], f_n[improved]
        iters[act] = it
        small = (f_old - f_n) <= options.rtol * np.maximum(f_old, np.finfo(float).tiny)
        done[act[small | ~improved]] = True
    return BatchEstimate(A, s, X1, f, iters, done.copy())


def fit_ml(data: ObservedData, cov: CovarianceSpec, options: FitOptions = FitOptions()) -> EstimateResult:
    """Alternating maximum-likelihood estimate of ``A``, ``s`` and the true CP locations.

    Each iteration solves the CP sub-problem
    ``x1k = (W1k + A^T W2k A)^-1 (W1k y1k + A^T W2k (y2k - s))`` and then the
    weighted regression for ``(A, s)``. Iteration stops once the relative
    decrease of the objective drops below ``options.rtol``.

    Raises
    ------
    DegenerateDesign
        Too few or collinear control points.
    NonConvergence
        ``options.max_iter`` reached (if ``options.raise_on_nonconvergence``);
        the partial result is attached as ``exc.result``.
    """
    Y1, Y2 = data.Y1[None], data.Y2[None]
    W1, W2 = _weights(cov)
    if W1.shape[:2] != (data.K, data.d):
        raise ValueError("covariance does not match the data dimensions")
    A, s = _init_ls_batch(Y1, Y2)
    X1 = _x_step(Y1, Y2, W1, W2, A, s)
    trace = [float(_objective(Y1, Y2, W1, W2, A, s, X1)[0])]
    converged = False
    it = 0
    while it < options.max_iter:
        it += 1
        A_n, s_n, N = _ts_step(Y2, W2, X1)
        if it == 1 and scaled_condition(N[0]) > COND_LIMIT:
            raise DegenerateDesign("weighted regression normal matrix is singular")
        X_n = _x_step(Y1, Y2, W1, W2, A_n, s_n)
        f_n = float(_objective(Y1, Y2, W1, W2, A_n, s_n, X_n)[0])
        f_old = trace[-1]
        if f_n > f_old:
            converged = True
            break
        A, s, X1 = A_n, s_n, X_n
        trace.append(f_n)
        if f_old - f_n <= options.rtol * max(f_old, np.finfo(float).tiny):
            converged = True
            break
    res = EstimateResult(A[0], s[0], X1[0], tuple(trace), it, converged)
    if not converged and options.raise_on_nonconvergence:
        raise NonConvergence(f"no convergence after {it} iterations", res)
    return res


def register_feature(A_hat, s_hat, y1F) -> NDArray:
    """Registered feature position ``A_hat y1F + s_hat``."""
    return np.asarray(A_hat, dtype=float) @ np.asarray(y1F, dtype=float) + np.asarray(s_hat, dtype=float)


def tre(A, s, A_hat, s_hat, x1) -> NDArray:
    """Target registration error ``(A - A_hat) x1 + (s - s_hat)``."""
    A, A_hat = np.asarray(A, dtype=float), np.asarray(A_hat, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    ds = np.asarray(s, dtype=float) - np.asarray(s_hat, dtype=float)
    if x1.ndim == 2:
        return (A - A_hat) @ x1 + ds[:, None]
    return (A - A_hat) @ x1 + ds


def lre(A, s, A_hat, s_hat, x1F, y1F) -> NDArray:
    """Localisation registration error ``(A x1F + s) - (A_hat y1F + s_hat)``."""
    x2F = np.asarray(A, dtype=float) @ np.asarray(x1F, dtype=float) + np.asarray(s, dtype=float)
    return x2F - register_feature(A_hat, s_hat, y1F)


def registration_errors(A, s, A_hat, s_hat, query_points, x1F=None, y1F=None) -> RegistrationErrors:
    """TRE at ``query_points`` (``(d, Q)`` or d-vector) and, given a feature, its LRE."""
    out = tre(A, s, A_hat, s_hat, query_points)
    ell = None if x1F is None else lre(A, s, A_hat, s_hat, x1F, y1F)
    return RegistrationErrors(out, ell)
