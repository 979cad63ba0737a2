"""Simulation studies comparing estimator spread with the Cramér-Rao bounds.

Scenarios follow the fluorescence-microscopy designs: CPs on a centred square
grid of side 81 um, photon counts drawn once per scenario, CP covariances
``(zeta_j / N_k) I`` with ``zeta_j`` from emission wavelengths 540/650 nm and
aperture 1.4, and a feature at (16, 20) um.

Reproducibility: a study seed feeds one ``SeedSequence``; the first child draws
the design (photon counts), the second is split into one substream per
fixed-size chunk of replications. Results therefore do not depend on how many
worker processes run the chunks.
"""

# ruff: noqa: N806, N803
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from regbound.closedform import crlb_ff_microscopy, microscopy_params
from regbound.errors import InvalidScenario
from regbound.estimator import FitOptions, ObservedData, fit_ml_batch
from regbound.fim import crlb_ff_general
from regbound.regmodel import (
    AffineTransform,
    ControlPointSet,
    FeatureSpec,
    IsotropicWeightedCovariance,
    RegistrationScenario,
    WeightedCovariance,
    rotation,
    shear,
    validate,
    weighted_summary,
)

__all__ = [
    "GRID_SIDE_NM",
    "STUDY_KINDS",
    "StudyConfig",
    "ParamStat",
    "StudySummary",
    "make_grid_scenario",
    "grid_points",
    "sample_observation",
    "sample_observations",
    "run_study",
    "qq_points",
    "qq_correlation",
    "simulate_localizations",
]

GRID_SIDE_NM = 81_000.0
TRANSLATION_NM = (4800.0, 4800.0)
FEATURE_NM = (16_000.0, 20_000.0)
LAMBDA_EM_NM = (540.0, 650.0)
APERTURE = 1.4
CORRELATED_SHAPE = np.array([[1.0, 0.5], [0.5, 1.0]])

# kind -> (CP photon range (inclusive), feature photons)
_PHOTONS = {
    "rotation": ((5000, 10000), 1000.0),
    "shear": ((5000, 10000), 1000.0),
    "correlated": ((5000, 10000), 1000.0),
    "lowsnr": ((200, 700), 300.0),
}
STUDY_KINDS = tuple(_PHOTONS)
DEFAULT_TRACK = ("x2F_1", "s1", "a11", "a21")


def grid_points(K: int, side: float = GRID_SIDE_NM) -> NDArray:
    """``(2, K)`` square grid centred at the origin spanning ``side`` per axis."""
    n = math.isqrt(K)
    if n * n != K or n < 2:
        raise ValueError(f"K={K} is not a square number >= 4")
    ticks = np.linspace(-side / 2, side / 2, n)
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.vstack([gx.ravel(), gy.ravel()])


def make_grid_scenario(
    kind: str,
    K: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    lam: float = 0.5,
    side: float = GRID_SIDE_NM,
    noise_scale: float = 1.0,
) -> RegistrationScenario:
    """Build one of the grid designs.

    ``rotation``: A = rot(30 deg), K square in [4, 64]. ``shear``: A = [[1, lam], [0, 1]],
    K = 9 by default. ``lowsnr``: as rotation but with CP counts on [200, 700] and a
    300-photon feature. ``correlated``: as rotation with covariance shape
    ``[[1, .5], [.5, 1]]`` instead of the identity. ``noise_scale`` multiplies every
    covariance (used for the zero-noise limit).
    """
    if kind not in _PHOTONS:
        raise ValueError(f"unknown study kind {kind!r}; expected one of {STUDY_KINDS}")
    if K is None:
        K = 9
    if kind in ("rotation", "lowsnr", "correlated") and not 4 <= K <= 64:
        raise ValueError(f"K={K} outside [4, 64]")
    X1 = grid_points(K, side)
    rng = np.random.default_rng(0) if rng is None else rng
    (lo, hi), NF = _PHOTONS[kind]
    N1 = rng.integers(lo, hi + 1, size=K).astype(float)
    z1 = (LAMBDA_EM_NM[0] / (2 * np.pi * APERTURE)) ** 2
    z2 = (LAMBDA_EM_NM[1] / (2 * np.pi * APERTURE)) ** 2
    A = shear(lam) if kind == "shear" else rotation(30.0)
    t = AffineTransform(A, TRANSLATION_NM)
    if kind == "correlated":
        cov = WeightedCovariance(1.0 / N1, z1 * noise_scale * CORRELATED_SHAPE, z2 * noise_scale * CORRELATED_SHAPE)
        feature = FeatureSpec(FEATURE_NM, z1 / NF * noise_scale * CORRELATED_SHAPE)
    else:
        cov = IsotropicWeightedCovariance(1.0 / N1, z1 * noise_scale, z2 * noise_scale)
        feature = FeatureSpec.isotropic(FEATURE_NM, z1 / NF * noise_scale)
    return RegistrationScenario(t, ControlPointSet(X1), cov, feature)


def _factors(scn):
    gen = scn.general_cov
    L1 = np.linalg.cholesky(gen.omega1)
    L2 = np.linalg.cholesky(gen.omega2)
    LF = None if scn.feature is None else np.linalg.cholesky(scn.feature.omega1)
    return L1, L2, LF


def sample_observations(scn: RegistrationScenario, rng: np.random.Generator, n: int):
    """Draw ``n`` independent data sets; returns ``(Y1, Y2, y1F)`` with a leading batch axis."""
    d, K = scn.d, scn.K
    L1, L2, LF = _factors(scn)
    z = rng.standard_normal((n, 2, K, d, 1))
    e1 = (L1 @ z[:, 0])[..., 0]  # (n, K, d)
    e2 = (L2 @ z[:, 1])[..., 0]
    Y1 = scn.cps.X1[None] + np.swapaxes(e1, -1, -2)
    Y2 = scn.X2[None] + np.swapaxes(e2, -1, -2)
    y1F = None
    if LF is not None:
        zf = rng.standard_normal((n, d))
        y1F = scn.feature.x1[None] + zf @ LF.T
    return Y1, Y2, y1F


def sample_observation(scn: RegistrationScenario, rng: np.random.Generator) -> ObservedData:
    """One noisy observation of the scenario's CPs (and feature, if any)."""
    problems = validate(scn)
    if problems:
        raise InvalidScenario(problems)
    Y1, Y2, y1F = sample_observations(scn, rng, 1)
    return ObservedData(Y1[0], Y2[0], None if y1F is None else y1F[0])


@dataclass(frozen=True)
class StudyConfig:
    """One simulation study.

    ``K`` is the CP count (square); ``lam`` the shear parameter (shear only).
    ``track`` names parameters as in ``ParameterLayout`` (``a11``, ``s1``,
    ``x2F_1``, ...). ``plugin`` adds the plug-in bound envelope for ``x2F_1``.
    """

    kind: str = "rotation"
    K: int = 9
    lam: float = 0.5
    n_reps: int = 1000
    seed: int = 0
    track: tuple = DEFAULT_TRACK
    plugin: bool = False
    qq: bool = False
    noise_scale: float = 1.0
    chunk_size: int = 500
    fit: FitOptions = FitOptions(raise_on_nonconvergence=False)

    def __post_init__(self):
        if self.n_reps < 2:
            raise ValueError("need at least 2 replications")
        if self.kind not in STUDY_KINDS:
            raise ValueError(f"unknown study kind {self.kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "track", tuple(self.track))

    @property
    def design_value(self) -> float:
        """The swept quantity: shear parameter for shear studies, otherwise K."""
        return self.lam if self.kind == "shear" else self.K


@dataclass(frozen=True)
class ParamStat:
    name: str
    sqrt_crlb: float
    sample_std: float

    @property
    def rel_gap(self) -> float:
        if self.sqrt_crlb == 0:
            return 0.0 if self.sample_std == 0 else math.inf
        return self.sample_std / self.sqrt_crlb - 1.0


@dataclass(frozen=True)
class StudySummary:
    """Outcome of ``run_study``. ``plugin`` maps name -> (true, min, max) sqrt bounds."""

    config: StudyConfig
    stats: tuple
    n_used: int
    n_excluded: int
    plugin: Optional[dict] = None
    qq: Optional[dict] = field(default=None, repr=False, compare=False)
    samples: Optional[dict] = field(default=None, repr=False, compare=False)
    runtime_s: float = field(default=0.0, compare=False)

    def stat(self, name: str) -> ParamStat:
        for s in self.stats:
            if s.name == name:
                return s
        raise KeyError(name)

    def plugin_spread(self, name: str = "x2F_1") -> float:
        true, lo, hi = self.plugin[name]
        return (hi - lo) / true


def _tracked_values(name, A, s, Y1, y1F):
    if name.startswith("x2F_"):
        i = int(name[4:]) - 1
        return (A @ y1F[..., None])[..., i, 0] + s[:, i]
    if name.startswith("a") and len(name) == 3:
        return A[:, int(name[1]) - 1, int(name[2]) - 1]
    if name.startswith("s"):
        return s[:, int(name[1:]) - 1]
    raise ValueError(f"cannot track parameter {name!r}")


def _plugin_bound(scn, mp, A, Y1, y1F):
    """sqrt of the leading diagonal of the photon-count bound at estimated values."""
    K = scn.K
    varsigma = np.sqrt(np.abs(np.linalg.det(A)))
    w = mp.N1  # 1 / eta
    gamma = w.mean()
    centroid = (Y1 * w).sum(axis=-1) / (K * gamma)
    r_sq = ((y1F - centroid) ** 2).sum(axis=-1)
    kappa_sq = (Y1**2).sum(axis=(-1, -2)) / (K * scn.d)
    reg = (varsigma**2 * mp.zeta1 / mp.N1_mean + mp.zeta2 / mp.N2_mean) / K
    return np.sqrt(varsigma**2 * mp.sigma1F_sq + reg * (1.0 + r_sq / kappa_sq))


def _true_plugin(scn, mp):
    ws = weighted_summary(scn.cps, scn.cov.eta, scn.feature)
    C = crlb_ff_microscopy(scn.K, ws.kappa_sq, ws.r_sq, scn.transform.scale_factor(), mp)
    return float(np.sqrt(C[0, 0]))


def _run_chunk(args):
    cfg, scn, seed_seq, n = args
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    Y1, Y2, y1F = sample_observations(scn, rng, n)
    est = fit_ml_batch(Y1, Y2, scn.cov, cfg.fit)
    out = {name: _tracked_values(name, est.A_hat, est.s_hat, Y1, y1F) for name in cfg.track}
    if cfg.plugin:
        mp = microscopy_params(scn)
        out["__plugin"] = _plugin_bound(scn, mp, est.A_hat, Y1, y1F)
    out["__converged"] = est.converged
    return out


def _scenario_for(cfg: StudyConfig, design_seq) -> RegistrationScenario:
    rng = np.random.Generator(np.random.PCG64(design_seq))
    return make_grid_scenario(cfg.kind, cfg.K, rng, lam=cfg.lam, noise_scale=cfg.noise_scale)


def run_study(cfg: StudyConfig, workers: int = 1) -> StudySummary:
    """Simulate ``cfg.n_reps`` registrations, fit each by ML and compare spreads to the bound.

    The reported bound for each tracked parameter is the exact (general-model)
    CRLB at the true parameters. Replications whose fit did not converge are
    excluded and counted.
    """
    t0 = time.perf_counter()
    design_seq, rep_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    scn = _scenario_for(cfg, design_seq)
    report = crlb_ff_general(scn)
    bounds = report.sqrt_crlb()

    n_chunks = -(-cfg.n_reps // cfg.chunk_size)
    seqs = rep_seq.spawn(n_chunks)
    sizes = [min(cfg.chunk_size, cfg.n_reps - i * cfg.chunk_size) for i in range(n_chunks)]
    tasks = [(cfg, scn, seqs[i], sizes[i]) for i in range(n_chunks)]
    if workers > 1 and n_chunks > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]

    ok = np.concatenate([p["__converged"] for p in parts])
    samples = {name: np.concatenate([p[name] for p in parts])[ok] for name in cfg.track}
    stats_ = tuple(
        ParamStat(name, bounds[name], float(np.std(samples[name], ddof=1))) for name in cfg.track
    )
    plugin = None
    if cfg.plugin:
        est = np.concatenate([p["__plugin"] for p in parts])[ok]
        plugin = {"x2F_1": (_true_plugin(scn, microscopy_params(scn)), float(est.min()), float(est.max()))}
    qq = None
    if cfg.qq:
        qq = {name: qq_points(v) for name, v in samples.items()}
    return StudySummary(
        config=cfg,
        stats=stats_,
        n_used=int(ok.sum()),
        n_excluded=int((~ok).sum()),
        plugin=plugin,
        qq=qq,
        samples=samples,
        runtime_s=time.perf_counter() - t0,
    )


def qq_points(samples):
    """Normal QQ pairs ``(Phi^-1(j / (n + 1)), x_(j))`` for ``j = 1..n``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 samples for a QQ plot")
    p = np.arange(1, n + 1) / (n + 1)
    return stats.norm.ppf(p), x


def qq_correlation(samples) -> float:
    t, x = qq_points(samples)
    return float(np.corrcoef(t, x)[0, 1])


def simulate_localizations(n: int = 300, photons: float = 7500.0, seed: int = 0):
    """Repeated localisations of one bead in both images.

    Returns a dict ``{"cam1_x", "cam1_y", "cam2_x", "cam2_y"}`` of ``n`` draws each,
    with variances ``zeta_j / photons``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for j, lam_em in enumerate(LAMBDA_EM_NM, start=1):
        sd = lam_em / (2 * np.pi * APERTURE) / np.sqrt(photons)
        draws = rng.normal(0.0, sd, size=(n, 2))
        out[f"cam{j}_x"] = draws[:, 0]
        out[f"cam{j}_y"] = draws[:, 1]
    return out


def with_overrides(cfg: StudyConfig, **kw) -> StudyConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
