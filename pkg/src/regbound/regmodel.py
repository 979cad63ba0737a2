"""Domain types for the two-image control-point registration experiment.

All positions are in nanometres and all covariances in nm^2. Arrays are stored
read-only so that scenario objects can be shared freely between workers.

Control points are stored column-wise: ``X1`` has shape ``(d, K)``. Per-point
covariance blocks are stacked along the first axis: shape ``(K, d, d)``.
"""

# ruff: noqa: N806, N803  - matrix names follow mathematical convention
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from regbound._linalg import is_spd

__all__ = [
    "AffineTransform",
    "ControlPointSet",
    "GeneralCovariance",
    "WeightedCovariance",
    "IsotropicWeightedCovariance",
    "CovarianceSpec",
    "FeatureSpec",
    "RegistrationScenario",
    "WeightedSummary",
    "ParameterLayout",
    "map_point",
    "rotation",
    "shear",
    "weighted_summary",
    "validate",
]


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def rotation(angle_deg: float) -> NDArray:
    """2x2 counter-clockwise rotation matrix."""
    t = np.deg2rad(angle_deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def shear(lam: float) -> NDArray:
    """Horizontal shear ``[[1, lam], [0, 1]]``."""
    return np.array([[1.0, lam], [0.0, 1.0]])


@dataclass(frozen=True)
class AffineTransform:
    """``x -> A x + s``."""

    A: NDArray
    s: NDArray

    def __post_init__(self):
        A = _frozen(self.A, 2)
        s = _frozen(self.s, 1)
        if A.shape[0] != A.shape[1] or A.shape[0] != s.shape[0]:
            raise ValueError(f"A {A.shape} and s {s.shape} disagree")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "s", s)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.A))

    def inverse(self) -> "AffineTransform":
        Ainv = np.linalg.inv(self.A)
        return AffineTransform(Ainv, -Ainv @ self.s)

    def scale_factor(self) -> float:
        """Scale ``|det A|^(1/d)``; equals the scale of ``A`` when it is a scaled unitary."""
        return float(abs(self.det) ** (1.0 / self.d))


def map_point(t: AffineTransform, x) -> NDArray:
    """Apply ``t`` to a d-vector or to the columns of a ``(d, K)`` array."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != t.d:
        raise ValueError(f"point dimension {x.shape[0]} does not match transform dimension {t.d}")
    if x.ndim == 1:
        return t.A @ x + t.s
    return t.A @ x + t.s[:, None]


@dataclass(frozen=True)
class ControlPointSet:
    """True CP locations in image 1, one column per point."""

    X1: NDArray

    def __post_init__(self):
        X1 = _frozen(self.X1, 2)
        if X1.shape[1] < 1:
            raise ValueError("need at least one control point")
        object.__setattr__(self, "X1", X1)

    @property
    def d(self) -> int:
        return self.X1.shape[0]

    @property
    def K(self) -> int:
        return self.X1.shape[1]


@dataclass(frozen=True)
class GeneralCovariance:
    """Arbitrary per-CP covariance blocks ``omega1[k]``, ``omega2[k]``."""

    omega1: NDArray
    omega2: NDArray

    def __post_init__(self):
        o1 = _frozen(self.omega1, 3)
        o2 = _frozen(self.omega2, 3)
        if o1.shape != o2.shape or o1.shape[1] != o1.shape[2]:
            raise ValueError(f"covariance stacks {o1.shape} and {o2.shape} disagree")
        object.__setattr__(self, "omega1", o1)
        object.__setattr__(self, "omega2", o2)

    @property
    def K(self) -> int:
        return self.omega1.shape[0]

    @property
    def d(self) -> int:
        return self.omega1.shape[1]

    def expand(self) -> "GeneralCovariance":
        return self

    def scaled(self, factor: float) -> "GeneralCovariance":
        return GeneralCovariance(self.omega1 * factor, self.omega2 * factor)


@dataclass(frozen=True)
class WeightedCovariance:
    """``Omega_{j,k} = eta_k * Omega_{j,0}``."""

    eta: NDArray
    omega1_0: NDArray
    omega2_0: NDArray

    def __post_init__(self):
        object.__setattr__(self, "eta", _frozen(self.eta, 1))
        object.__setattr__(self, "omega1_0", _frozen(self.omega1_0, 2))
        object.__setattr__(self, "omega2_0", _frozen(self.omega2_0, 2))
        if self.omega1_0.shape != self.omega2_0.shape:
            raise ValueError("base covariances disagree in shape")

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    @property
    def d(self) -> int:
        return self.omega1_0.shape[0]

    def expand(self) -> GeneralCovariance:
        eta = self.eta[:, None, None]
        return GeneralCovariance(eta * self.omega1_0, eta * self.omega2_0)

    def scaled(self, factor: float) -> "WeightedCovariance":
        return WeightedCovariance(self.eta, self.omega1_0 * factor, self.omega2_0 * factor)


@dataclass(frozen=True)
class IsotropicWeightedCovariance:
    """``Omega_{j,k} = eta_k * sigma_{j,0}^2 * I``."""

    eta: NDArray
    sigma1_sq: float
    sigma2_sq: float
    d: int = 2

    def __post_init__(self):
        object.__setattr__(self, "eta", _frozen(self.eta, 1))
        object.__setattr__(self, "sigma1_sq", float(self.sigma1_sq))
        object.__setattr__(self, "sigma2_sq", float(self.sigma2_sq))

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    def as_weighted(self) -> WeightedCovariance:
        eye = np.eye(self.d)
        return WeightedCovariance(self.eta, self.sigma1_sq * eye, self.sigma2_sq * eye)

    def expand(self) -> GeneralCovariance:
        return self.as_weighted().expand()

    def scaled(self, factor: float) -> "IsotropicWeightedCovariance":
        return IsotropicWeightedCovariance(
            self.eta, self.sigma1_sq * factor, self.sigma2_sq * factor, self.d
        )


CovarianceSpec = Union[GeneralCovariance, WeightedCovariance, IsotropicWeightedCovariance]


@dataclass(frozen=True)
class FeatureSpec:
    """A feature seen only in image 1: true location and its localisation covariance."""

    x1: NDArray
    omega1: NDArray

    def __post_init__(self):
        object.__setattr__(self, "x1", _frozen(self.x1, 1))
        object.__setattr__(self, "omega1", _frozen(self.omega1, 2))
        if self.omega1.shape != (self.x1.shape[0],) * 2:
            raise ValueError("feature covariance shape does not match its location")

    @classmethod
    def isotropic(cls, x1, sigma_sq: float) -> "FeatureSpec":
        x1 = np.asarray(x1, dtype=float)
        return cls(x1, sigma_sq * np.eye(x1.shape[0]))

    @property
    def d(self) -> int:
        return self.x1.shape[0]

    def isotropic_variance(self) -> Optional[float]:
        """``sigma^2`` when the covariance is ``sigma^2 I`` (exactly), else None."""
        v = self.omega1[0, 0]
        if np.array_equal(self.omega1, v * np.eye(self.d)):
            return float(v)
        return None


@dataclass(frozen=True)
class RegistrationScenario:
    """Ground truth for one registration experiment."""

    transform: AffineTransform
    cps: ControlPointSet
    cov: CovarianceSpec
    feature: Optional[FeatureSpec] = None

    @property
    def d(self) -> int:
        return self.cps.d

    @property
    def K(self) -> int:
        return self.cps.K

    @property
    def X2(self) -> NDArray:
        return map_point(self.transform, self.cps.X1)

    @cached_property
    def general_cov(self) -> GeneralCovariance:
        return self.cov.expand()

    @property
    def x2F(self) -> Optional[NDArray]:
        if self.feature is None:
            return None
        return map_point(self.transform, self.feature.x1)

    def with_feature(self, feature: Optional[FeatureSpec]) -> "RegistrationScenario":
        return RegistrationScenario(self.transform, self.cps, self.cov, feature)

    def with_transform(self, transform: AffineTransform) -> "RegistrationScenario":
        return RegistrationScenario(transform, self.cps, self.cov, self.feature)


def validate(scn: RegistrationScenario) -> list[str]:
    """List violated scenario invariants; an empty list means the scenario is usable."""
    problems: list[str] = []
    t, cps, cov = scn.transform, scn.cps, scn.cov
    d = cps.d
    if d not in (2, 3):
        problems.append(f"dimension d={d} not in {{2, 3}}")
    if t.d != d:
        problems.append(f"dimension mismatch: transform d={t.d}, control points d={d}")
    if cov.d != d:
        problems.append(f"dimension mismatch: covariance d={cov.d}, control points d={d}")
    if cov.K != cps.K:
        problems.append(f"dimension mismatch: covariance K={cov.K}, control points K={cps.K}")
    if not np.all(np.isfinite(cps.X1)):
        problems.append("control point locations not finite")
    if not (np.all(np.isfinite(t.A)) and np.all(np.isfinite(t.s))):
        problems.append("transform not finite")
    elif t.d == d and abs(t.det) <= 1e-12:
        problems.append("A not invertible")
    if isinstance(cov, (WeightedCovariance, IsotropicWeightedCovariance)):
        if not np.all(cov.eta > 0):
            problems.append("covariance weights eta must be positive")
    if isinstance(cov, IsotropicWeightedCovariance):
        if not (cov.sigma1_sq > 0 and cov.sigma2_sq > 0):
            problems.append("covariance not SPD: isotropic variances must be positive")
    if not problems or all(not p.startswith("dimension mismatch") for p in problems):
        gen = cov.expand()
        bad = [k for k in range(gen.K) if not (is_spd(gen.omega1[k]) and is_spd(gen.omega2[k]))]
        if bad:
            problems.append(f"covariance not SPD for control points {[k + 1 for k in bad]}")
    if scn.feature is not None:
        f = scn.feature
        if f.d != d:
            problems.append(f"dimension mismatch: feature d={f.d}, control points d={d}")
        elif not is_spd(f.omega1):
            problems.append("feature covariance not SPD")
        if not np.all(np.isfinite(f.x1)):
            problems.append("feature location not finite")
    return problems


@dataclass(frozen=True)
class WeightedSummary:
    """Weighted moments of the CP layout used by the closed-form bounds.

    ``gamma`` is the mean inverse weight, ``xbar1`` the weighted first moment,
    ``Xi`` the weighted second moment and ``Psi`` the weighted scatter about
    the weighted centroid ``xbar1 / gamma``. ``Gamma[i]`` is the d x d block
    ``gamma^-1 Xbar_i Psi^-1`` (None when Psi is singular).
    """

    K: int
    gamma: float
    xbar1: NDArray
    Xi: NDArray
    Psi: NDArray
    Gamma: Optional[tuple]
    nu_sq: float
    kappa_sq: float
    r_sq: Optional[float]
    chi: NDArray = field(repr=False)
    X1: NDArray = field(repr=False)
    nu_anisotropy: float = 1.0
    kappa_anisotropy: float = 1.0

    @property
    def d(self) -> int:
        return self.xbar1.shape[0]

    @property
    def centroid(self) -> NDArray:
        return self.xbar1 / self.gamma

    def basis_row(self, i: int, k: int) -> NDArray:
        """``X_{i,k} = e_i kron x_{1,k}^T``: zeros except row ``i`` (0-based)."""
        out = np.zeros((self.d, self.d))
        out[i] = self.X1[:, k]
        return out

    def mean_basis_row(self, i: int) -> NDArray:
        """``Xbar_i = e_i kron xbar1^T``."""
        out = np.zeros((self.d, self.d))
        out[i] = self.xbar1
        return out


def _anisotropy(M):
    eig = np.linalg.eigvalsh(M)
    return float(eig[-1] / eig[0]) if eig[0] > 0 else np.inf


def weighted_summary(cps, eta, feature: Optional[FeatureSpec] = None) -> WeightedSummary:
    """Weighted layout statistics for CPs ``cps`` (ControlPointSet or (d, K) array)."""
    X1 = cps.X1 if isinstance(cps, ControlPointSet) else np.asarray(cps, dtype=float)
    eta = np.asarray(eta, dtype=float)
    d, K = X1.shape
    if eta.shape != (K,):
        raise ValueError(f"need {K} weights, got shape {eta.shape}")
    if not np.all(eta > 0):
        raise ValueError("weights eta must be positive")
    w = 1.0 / eta
    chi = np.einsum("ik,jk->kij", X1, X1)
    gamma = float(w.mean())
    xbar1 = (X1 * w).sum(axis=1) / K
    Xi = (chi * w[:, None, None]).sum(axis=0) / K
    Psi = Xi - np.outer(xbar1, xbar1) / gamma
    Psi = 0.5 * (Psi + Psi.T)
    Gamma = None
    if np.linalg.matrix_rank(Psi) == d and np.linalg.cond(Psi) < 1e12:
        Psi_inv = np.linalg.inv(Psi)
        Gamma = tuple(
            np.outer(np.eye(d)[i], xbar1) @ Psi_inv / gamma for i in range(d)
        )
    kappa_M = chi.mean(axis=0)
    r_sq = None
    if feature is not None:
        r_sq = float(np.sum((feature.x1 - xbar1 / gamma) ** 2))
    return WeightedSummary(
        K=K,
        gamma=gamma,
        xbar1=xbar1,
        Xi=Xi,
        Psi=Psi,
        Gamma=Gamma,
        nu_sq=float(np.trace(Xi) / d),
        kappa_sq=float(np.trace(kappa_M) / d),
        r_sq=r_sq,
        chi=chi,
        X1=X1,
        nu_anisotropy=_anisotropy(Xi),
        kappa_anisotropy=_anisotropy(kappa_M),
    )


class ParameterLayout:
    """Index map for ``theta_FTC = [x2F; vec_rows(A); s; x1_1; ...; x1_K]``.

    ``vec_rows(A)`` stacks the rows of A: a11, a12, ..., a1d, a21, ... which is
    the layout multiplied by ``H_k = [I_d kron x_k^T, I_d]``. Without a feature
    the leading ``x2F`` block is absent and the vector is ``theta_TC``.
    """

    def __init__(self, d: int, K: int, with_feature: bool = False):
        self.d = d
        self.K = K
        self.with_feature = with_feature
        names: list[str] = []
        if with_feature:
            names += [f"x2F_{i + 1}" for i in range(d)]
        names += [f"a{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        names += [f"s{i + 1}" for i in range(d)]
        names += [f"x1_{k + 1}_{i + 1}" for k in range(K) for i in range(d)]
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def n_transform(self) -> int:
        return self.d * self.d + self.d

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def feature(self) -> slice:
        return slice(0, self.d if self.with_feature else 0)

    @property
    def transform(self) -> slice:
        start = self.feature.stop
        return slice(start, start + self.n_transform)

    @property
    def control(self) -> slice:
        start = self.transform.stop
        return slice(start, start + self.d * self.K)

    @property
    def transform_names(self) -> tuple:
        return self.names[self.transform]

    def index(self, name: str) -> int:
        return self._index[name]

    def __repr__(self):
        return f"ParameterLayout(d={self.d}, K={self.K}, with_feature={self.with_feature})"

    def __eq__(self, other):
        return isinstance(other, ParameterLayout) and (self.d, self.K, self.with_feature) == (
            other.d,
            other.K,
            other.with_feature,
        )

    def __hash__(self):
        return hash((self.d, self.K, self.with_feature))
