"""INI-style scenario, study and data files.

Scenario file::

    [transform]
    A = 0.8660254037844387, -0.5; 0.5, 0.8660254037844387   # rows separated by ';'
    s = 4800, 4800

    [control_points]
    points = -40500, -40500; 0, -40500; ...                 # one CP per ';' group
    # or a generator:
    # generator = grid
    # K = 9
    # side = 81000

    [covariance]
    kind = isotropic_weighted          # or: weighted, general
    eta = 0.0002, 0.00015, ...         # weighted kinds
    sigma1_sq = 3768.4                 # isotropic_weighted
    sigma2_sq = 5460.6
    # weighted:  omega1_0 = 1, 0.5; 0.5, 1   omega2_0 = ...
    # general:   omega1 = <block 1> | <block 2> | ...   omega2 = ...

    [feature]                          # optional
    x1 = 16000, 20000
    sigma1_sq = 3.7684                 # or: omega1 = a, b; c, d

Study file::

    [study]
    kind = rotation                    # rotation | shear | lowsnr | correlated
    K = 4, 9, 16                       # one study per value
    lambda = 0.5                       # shear parameter(s)
    n = 20000
    seed = 1
    track = x2F_1, s1, a11, a21
    plugin = false

Data file: CSV with header ``k,y1_x,y1_y[,y1_z],y2_x,y2_y[,y2_z]`` in nm.
"""

# ruff: noqa: N806
from __future__ import annotations

import configparser
import csv
import io
from pathlib import Path

import numpy as np

from regbound.estimator import ObservedData
from regbound.montecarlo import StudyConfig, grid_points
from regbound.regmodel import (
    AffineTransform,
    ControlPointSet,
    FeatureSpec,
    GeneralCovariance,
    IsotropicWeightedCovariance,
    RegistrationScenario,
    WeightedCovariance,
)

__all__ = [
    "ConfigError",
    "parse_scenario",
    "load_scenario",
    "dump_scenario",
    "save_scenario",
    "parse_study",
    "load_study",
    "load_data",
    "dump_data",
]

_AXES = "xyz"


class ConfigError(ValueError):
    """Malformed scenario, study or data file."""


def _vector(text):
    try:
        return np.array([float(v) for v in text.replace("\n", " ").split(",") if v.strip()])
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _matrix(text):
    rows = [_vector(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"bad matrix {text!r}")
    return np.vstack(rows)


def _blocks(text):
    return np.stack([_matrix(b) for b in text.split("|") if b.strip()])


def _fmt_vec(v):
    return ", ".join(repr(float(x)) for x in np.ravel(v))


def _fmt_mat(M):
    return "; ".join(_fmt_vec(r) for r in np.atleast_2d(M))


def _fmt_blocks(B):
    return " | ".join(_fmt_mat(b) for b in B)


def _parser():
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    return cp


def _need(cp, section, key):
    try:
        return cp[section][key]
    except KeyError as exc:
        raise ConfigError(f"missing [{section}] {key}") from exc


def parse_scenario(text: str) -> RegistrationScenario:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    A = _matrix(_need(cp, "transform", "A"))
    s = _vector(_need(cp, "transform", "s"))
    cps = cp["control_points"] if cp.has_section("control_points") else None
    if cps is None:
        raise ConfigError("missing [control_points]")
    if "points" in cps:
        X1 = _matrix(cps["points"]).T
    elif cps.get("generator", "").strip() == "grid":
        X1 = grid_points(int(cps["K"]), float(cps.get("side", "81000")))
    else:
        raise ConfigError("[control_points] needs 'points' or 'generator = grid'")
    if not cp.has_section("covariance"):
        raise ConfigError("missing [covariance]")
    c = cp["covariance"]
    kind = c.get("kind", "").strip()
    if kind == "general":
        cov = GeneralCovariance(_blocks(_need(cp, "covariance", "omega1")), _blocks(_need(cp, "covariance", "omega2")))
    elif kind == "weighted":
        cov = WeightedCovariance(
            _vector(_need(cp, "covariance", "eta")),
            _matrix(_need(cp, "covariance", "omega1_0")),
            _matrix(_need(cp, "covariance", "omega2_0")),
        )
    elif kind == "isotropic_weighted":
        cov = IsotropicWeightedCovariance(
            _vector(_need(cp, "covariance", "eta")),
            float(_need(cp, "covariance", "sigma1_sq")),
            float(_need(cp, "covariance", "sigma2_sq")),
            d=X1.shape[0],
        )
    else:
        raise ConfigError(f"unknown covariance kind {kind!r}")
    feature = None
    if cp.has_section("feature"):
        f = cp["feature"]
        x1 = _vector(_need(cp, "feature", "x1"))
        if "omega1" in f:
            feature = FeatureSpec(x1, _matrix(f["omega1"]))
        else:
            feature = FeatureSpec.isotropic(x1, float(_need(cp, "feature", "sigma1_sq")))
    try:
        return RegistrationScenario(AffineTransform(A, s), ControlPointSet(X1), cov, feature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path) -> RegistrationScenario:
    return parse_scenario(Path(path).read_text())


def dump_scenario(scn: RegistrationScenario) -> str:
    cp = _parser()
    cp["transform"] = {"A": _fmt_mat(scn.transform.A), "s": _fmt_vec(scn.transform.s)}
    cp["control_points"] = {"points": _fmt_mat(scn.cps.X1.T)}
    cov = scn.cov
    if isinstance(cov, IsotropicWeightedCovariance):
        cp["covariance"] = {
            "kind": "isotropic_weighted",
            "eta": _fmt_vec(cov.eta),
            "sigma1_sq": repr(cov.sigma1_sq),
            "sigma2_sq": repr(cov.sigma2_sq),
        }
    elif isinstance(cov, WeightedCovariance):
        cp["covariance"] = {
            "kind": "weighted",
            "eta": _fmt_vec(cov.eta),
            "omega1_0": _fmt_mat(cov.omega1_0),
            "omega2_0": _fmt_mat(cov.omega2_0),
        }
    else:
        cp["covariance"] = {"kind": "general", "omega1": _fmt_blocks(cov.omega1), "omega2": _fmt_blocks(cov.omega2)}
    if scn.feature is not None:
        f = scn.feature
        iso = f.isotropic_variance()
        entry = {"sigma1_sq": repr(iso)} if iso is not None else {"omega1": _fmt_mat(f.omega1)}
        cp["feature"] = {"x1": _fmt_vec(f.x1), **entry}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def save_scenario(scn: RegistrationScenario, path) -> None:
    Path(path).write_text(dump_scenario(scn))


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def parse_study(text: str) -> list[StudyConfig]:
    """One ``StudyConfig`` per swept value (K for grid kinds, lambda for shear)."""
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if not cp.has_section("study"):
        raise ConfigError("missing [study]")
    st = cp["study"]
    kind = st.get("kind", "rotation").strip()
    Ks = [int(v) for v in _vector(st.get("K", "9"))]
    lams = list(_vector(st.get("lambda", "0.5")))
    base = dict(
        kind=kind,
        n_reps=int(st.get("n", "1000")),
        seed=int(st.get("seed", "0")),
        plugin=_bool(st.get("plugin", "false")),
    )
    if "track" in st:
        base["track"] = tuple(t.strip() for t in st["track"].split(",") if t.strip())
    try:
        if kind == "shear":
            return [StudyConfig(K=Ks[0], lam=float(lam), **base) for lam in lams]
        return [StudyConfig(K=K, **base) for K in Ks]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_study(path) -> list[StudyConfig]:
    return parse_study(Path(path).read_text())


def load_data(path) -> ObservedData:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    d = 3 if "y1_z" in rows[0] else 2
    try:
        rows.sort(key=lambda r: int(r["k"]))
        Y1 = np.array([[float(r[f"y1_{a}"]) for r in rows] for a in _AXES[:d]])
        Y2 = np.array([[float(r[f"y2_{a}"]) for r in rows] for a in _AXES[:d]])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed data file ({exc})") from exc
    return ObservedData(Y1, Y2)


def dump_data(data: ObservedData) -> str:
    d = data.d
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"y1_{a}" for a in _AXES[:d]] + [f"y2_{a}" for a in _AXES[:d]])
    for k in range(data.K):
        w.writerow([k + 1] + [repr(float(v)) for v in data.Y1[:, k]] + [repr(float(v)) for v in data.Y2[:, k]])
    return buf.getvalue()
