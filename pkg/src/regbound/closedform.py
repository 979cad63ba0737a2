"""Closed-form bounds for the isotropic weighted covariance model (d = 2).

These hold when ``Omega_{j,k} = eta_k sigma_{j,0}^2 I``, ``Omega_1F = sigma_1F^2 I``
and ``A = varsigma R`` with ``R`` orthogonal. The general route in
:mod:`regbound.fim` needs none of this; the functions here exist because the
closed forms expose how the bound depends on K, photon counts and CP spread.
"""

# ruff: noqa: N806, N803
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from regbound.errors import AssumptionViolated, SingularScatter
from regbound.fim import design_rows
from regbound.regmodel import (
    IsotropicWeightedCovariance,
    RegistrationScenario,
    WeightedCovariance,
    weighted_summary,
)

__all__ = [
    "MicroscopyParams",
    "zeta",
    "check_scaled_orthogonal",
    "isotropic_form",
    "crlb_tt_iso",
    "crlb_ff_iso",
    "crlb_ff_symmetric",
    "crlb_ff_microscopy",
    "microscopy_params",
]

ASSUMPTION_RTOL = 1e-9


def zeta(lambda_em: float, n_F: float) -> float:
    """Localisation accuracy constant ``lambda^2 / (4 pi^2 n_F^2)`` in nm^2."""
    if not (lambda_em > 0 and n_F > 0):
        raise ValueError("wavelength and aperture must be positive")
    return lambda_em**2 / (4.0 * np.pi**2 * n_F**2)


@dataclass(frozen=True)
class MicroscopyParams:
    """Photon-count parameterisation of the isotropic weighted model.

    ``N1`` are the CP photon counts in image 1; image 2 counts are ``c * N1``.
    CP covariances are ``(zeta1 / N1_k) I`` and ``(zeta2 / N2_k) I``, the
    feature's is ``(zeta1 / NF) I``.
    """

    N1: NDArray
    c: float
    zeta1: float
    zeta2: float
    NF: float

    def __post_init__(self):
        N1 = np.array(self.N1, dtype=float)
        N1.setflags(write=False)
        object.__setattr__(self, "N1", N1)
        if not (np.all(N1 > 0) and self.c > 0 and self.zeta1 > 0 and self.zeta2 > 0 and self.NF > 0):
            raise ValueError("microscopy parameters must all be positive")

    @classmethod
    def from_wavelengths(cls, N1, c, lambda1, lambda2, n_F, NF) -> "MicroscopyParams":
        return cls(N1, c, zeta(lambda1, n_F), zeta(lambda2, n_F), NF)

    @property
    def N2(self) -> NDArray:
        return self.c * self.N1

    @property
    def N1_mean(self) -> float:
        return float(self.N1.mean())

    @property
    def N2_mean(self) -> float:
        return self.c * self.N1_mean

    @property
    def sigma1F_sq(self) -> float:
        return self.zeta1 / self.NF

    def covariance(self, d: int = 2) -> IsotropicWeightedCovariance:
        return IsotropicWeightedCovariance(1.0 / self.N1, self.zeta1, self.zeta2 / self.c, d)


def microscopy_params(scn: RegistrationScenario, c: float = 1.0) -> MicroscopyParams:
    """Recover photon counts from an isotropic weighted scenario (``eta_k = 1/N1_k``)."""
    cov = scn.cov
    if not isinstance(cov, IsotropicWeightedCovariance):
        raise AssumptionViolated("microscopy parameters need an isotropic weighted covariance")
    if scn.feature is None or scn.feature.isotropic_variance() is None:
        raise AssumptionViolated("microscopy parameters need an isotropic feature covariance")
    return MicroscopyParams(
        N1=1.0 / cov.eta,
        c=c,
        zeta1=cov.sigma1_sq,
        zeta2=cov.sigma2_sq * c,
        NF=cov.sigma1_sq / scn.feature.isotropic_variance(),
    )


def check_scaled_orthogonal(A, rtol: float = ASSUMPTION_RTOL) -> float:
    """Return ``varsigma`` if ``A^T A = varsigma^2 I`` within ``rtol``; raise otherwise."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    vs_sq = abs(np.linalg.det(A)) ** (2.0 / d)
    dev = np.linalg.norm(A.T @ A - vs_sq * np.eye(d)) / (vs_sq * np.sqrt(d))
    if not dev <= rtol:
        raise AssumptionViolated(
            f"A is not a scaled orthogonal matrix (relative deviation {dev:.3g})"
        )
    return float(np.sqrt(vs_sq))


def _isotropic_variance(M):
    M = np.asarray(M, dtype=float)
    v = float(np.trace(M) / M.shape[0])
    dev = np.linalg.norm(M - v * np.eye(M.shape[0])) / v
    if not dev <= ASSUMPTION_RTOL:
        raise AssumptionViolated(f"covariance is not isotropic (relative deviation {dev:.3g})")
    return v


def isotropic_form(scn: RegistrationScenario):
    """Check the isotropic/scaled-orthogonal assumptions on ``scn``.

    Returns ``(eta, sigma1_sq, sigma2_sq, sigma1F_sq, varsigma)``;
    ``sigma1F_sq`` is None when the scenario has no feature.
    """
    if scn.d != 2:
        raise AssumptionViolated("closed-form bounds are stated for d = 2 only")
    cov = scn.cov
    if isinstance(cov, IsotropicWeightedCovariance):
        eta, s1, s2 = cov.eta, cov.sigma1_sq, cov.sigma2_sq
    elif isinstance(cov, WeightedCovariance):
        eta, s1, s2 = cov.eta, _isotropic_variance(cov.omega1_0), _isotropic_variance(cov.omega2_0)
    else:
        raise AssumptionViolated("closed-form bounds need a weighted covariance model")
    sF = None
    if scn.feature is not None:
        sF = _isotropic_variance(scn.feature.omega1)
    varsigma = check_scaled_orthogonal(scn.transform.A)
    return np.asarray(eta), s1, s2, sF, varsigma


def crlb_tt_iso(cps, eta, sigma1_sq: float, sigma2_sq: float, varsigma: float) -> NDArray:
    """6x6 transform-parameter bound in the ``[a11, a12, a21, a22, s1, s2]`` layout.

    ``C_TT = beta / K * [[Psi^-1, 0, -G1^T], [0, Psi^-1, -G2^T], [-G1, -G2, S]]``
    with ``beta = varsigma^2 sigma1^2 + sigma2^2``, ``G_i = gamma^-1 Xbar_i Psi^-1`` and
    ``S = gamma^-1 (I + G1 Xbar_1^T + G2 Xbar_2^T)``.
    """
    ws = weighted_summary(cps, eta)
    if ws.d != 2:
        raise AssumptionViolated("closed-form bounds are stated for d = 2 only")
    if ws.Gamma is None or np.linalg.cond(ws.Psi) > 1e12:
        raise SingularScatter("weighted CP scatter Psi is singular")
    Psi_inv = np.linalg.inv(ws.Psi)
    G1, G2 = ws.Gamma
    X1b, X2b = ws.mean_basis_row(0), ws.mean_basis_row(1)
    Z = np.zeros((2, 2))
    s_block = (np.eye(2) + G1 @ X1b.T + G2 @ X2b.T) / ws.gamma
    M = np.block([[Psi_inv, Z, -G1.T], [Z, Psi_inv, -G2.T], [-G1, -G2, s_block]])
    beta = varsigma**2 * sigma1_sq + sigma2_sq
    C = beta / ws.K * M
    return 0.5 * (C + C.T)


def crlb_ff_iso(scn: RegistrationScenario) -> NDArray:
    """2x2 feature bound under the isotropic / scaled-orthogonal assumptions.

    Evaluates ``(alpha^-1 I - alpha^-2 D (alpha^-1 D^T D + beta^-1 sum_k eta_k^-1 H_k^T H_k)^-1 D^T)^-1``
    with ``D = [I kron x1F^T, I]``, ``alpha = varsigma^2 sigma1F^2`` and
    ``beta = varsigma^2 sigma1_0^2 + sigma2_0^2``.
    """
    if scn.feature is None:
        raise AssumptionViolated("scenario has no feature")
    eta, s1, s2, sF, varsigma = isotropic_form(scn)
    alpha = varsigma**2 * sF
    beta = varsigma**2 * s1 + s2
    H = design_rows(scn.cps.X1)
    info_T = np.einsum("k,kia,kib->ab", 1.0 / eta, H, H) / beta
    D = design_rows(scn.feature.x1[:, None])[0]
    inner = np.linalg.inv(D.T @ D / alpha + info_T)
    info = np.eye(2) / alpha - D @ inner @ D.T / alpha**2
    C = np.linalg.inv(0.5 * (info + info.T))
    return 0.5 * (C + C.T)


def crlb_ff_symmetric(
    K: int,
    gamma: float,
    nu_sq: float,
    r_sq: float,
    varsigma: float,
    sigma1F_sq: float,
    sigma1_sq: float,
    sigma2_sq: float,
) -> NDArray:
    """Feature bound when the CP layout has zero weighted mean and scalar weighted scatter.

    ``(varsigma^2 sigma1F^2 + beta / (K gamma) * (1 + gamma r^2 / nu^2)) I``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if not all(v > 0 for v in (gamma, nu_sq, varsigma, sigma1F_sq, sigma1_sq, sigma2_sq)) or r_sq < 0:
        raise ValueError("parameters must be positive (r_sq non-negative)")
    beta = varsigma**2 * sigma1_sq + sigma2_sq
    v = varsigma**2 * sigma1F_sq + beta / (K * gamma) * (1.0 + gamma * r_sq / nu_sq)
    return v * np.eye(2)


def crlb_ff_microscopy(
    K: int,
    kappa_sq: float,
    r_sq: float,
    varsigma: float,
    mp: MicroscopyParams,
    sigma1F_sq: Optional[float] = None,
) -> NDArray:
    """Feature bound in photon-count form.

    ``(varsigma^2 sigma1F^2 + (varsigma^2 zeta1/N1 + zeta2/N2) / K * (1 + r^2/kappa^2)) I``
    with mean photon counts ``N1``, ``N2``. ``sigma1F_sq`` defaults to ``zeta1 / NF``.
    """
    if K < 1 or not kappa_sq > 0 or r_sq < 0 or not varsigma > 0:
        raise ValueError("need K >= 1, kappa_sq > 0, r_sq >= 0, varsigma > 0")
    if sigma1F_sq is None:
        sigma1F_sq = mp.sigma1F_sq
    reg = (varsigma**2 * mp.zeta1 / mp.N1_mean + mp.zeta2 / mp.N2_mean) / K
    v = varsigma**2 * sigma1F_sq + reg * (1.0 + r_sq / kappa_sq)
    return v * np.eye(2)
