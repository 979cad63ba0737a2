"""``regbound`` command line: bounds, fits and simulation studies as CSV.

Exit codes: 0 success, 2 bad arguments or unreadable input, 3 invalid
scenario, 4 singular Fisher information, 5 too many non-converged fits.
"""

# ruff: noqa: N806
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from regbound import closedform, montecarlo
from regbound.config import ConfigError, load_data, load_scenario, load_study
from regbound.errors import (
    AssumptionViolated,
    DegenerateDesign,
    InvalidScenario,
    NonConvergence,
    SingularFim,
)
from regbound.estimator import FitOptions, fit_ml
from regbound.fim import build_fim_tc, crlb_ff_general, crlb_tt
from regbound.montecarlo import StudyConfig, run_study

EXIT_OK, EXIT_ARGS, EXIT_SCENARIO, EXIT_SINGULAR, EXIT_NONCONVERGENCE = 0, 2, 3, 4, 5
# share of replications allowed to fail before `simulate`/`reproduce` exit with 5
NONCONVERGENCE_LIMIT = 0.01

STUDY_COLUMNS = ["study_kind", "K_or_lambda", "parameter", "sqrt_crlb", "sample_std", "rel_gap", "n_reps", "seed"]
ROTATION_KS = (4, 9, 16, 25, 36, 49, 64)
SHEAR_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_REPS = 1_000_000
QQ_DRAWS = 300


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """12 significant digits, dot decimal."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".12g")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _check_out(out):
    if out is None:
        return
    parent = Path(out).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"output path {out} is not writable")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("REGBOUND_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"REGBOUND_THREADS={env!r} is not an integer") from exc
    return 1


def _read(loader, path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} file {path} not found")
    try:
        return loader(path)
    except ConfigError as exc:
        raise UsageError(f"{what} file {path}: {exc}") from exc


def cmd_crlb(args) -> int:
    scn = _read(load_scenario, args.scenario, "scenario")
    report = crlb_ff_general(scn) if scn.feature is not None else crlb_tt(build_fim_tc(scn))
    general = report.sqrt_crlb()
    closed = {}
    try:
        eta, s1, s2, _, varsigma = closedform.isotropic_form(scn)
        C_TT = closedform.crlb_tt_iso(scn.cps, eta, s1, s2, varsigma)
        for name, v in zip(report.layout.transform_names, np.diag(C_TT)):
            closed[name] = float(np.sqrt(v))
        if scn.feature is not None:
            C_FF = closedform.crlb_ff_iso(scn)
            for i in range(2):
                closed[f"x2F_{i + 1}"] = float(np.sqrt(C_FF[i, i]))
    except (AssumptionViolated, ArithmeticError):
        closed = {}
    names = [n for n in general if not n.startswith("x1_")]
    rows = []
    for n in names:
        g = general[n]
        c = closed.get(n)
        rows.append([n, g, "" if c is None else c, "" if c is None else abs(c - g) / g])
    _emit(_csv_text(["parameter", "sqrt_crlb", "sqrt_crlb_closedform", "rel_diff"], rows), args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    scn = _read(load_scenario, args.scenario, "scenario")
    data = _read(load_data, args.data, "data")
    if data.K != scn.K or data.d != scn.d:
        raise UsageError(f"data has d={data.d}, K={data.K}; scenario covariance has d={scn.d}, K={scn.K}")
    res = fit_ml(data, scn.cov, FitOptions(raise_on_nonconvergence=False))
    d = data.d
    rows = [[f"a{i + 1}{j + 1}", res.A_hat[i, j]] for i in range(d) for j in range(d)]
    rows += [[f"s{i + 1}", res.s_hat[i]] for i in range(d)]
    rows += [["objective", res.objective], ["iterations", res.iterations], ["converged", str(res.converged).lower()]]
    _emit(_csv_text(["quantity", "value"], rows), args.out)
    return EXIT_OK if res.converged else EXIT_NONCONVERGENCE


def _study_rows(summary):
    cfg = summary.config
    rows = []
    for st in summary.stats:
        rows.append([cfg.kind, cfg.design_value, st.name, st.sqrt_crlb, st.sample_std, st.rel_gap, summary.n_used, cfg.seed])
    if summary.plugin:
        for name, (true, lo, hi) in summary.plugin.items():
            for tag, v in (("plugin_min", lo), ("plugin_max", hi)):
                rows.append([cfg.kind, cfg.design_value, f"{name}:{tag}", true, v, v / true - 1.0, summary.n_used, cfg.seed])
    return rows


def _run_studies(configs, args) -> int:
    workers = _threads(args)
    rows = []
    worst = 0.0
    for cfg in configs:
        summary = run_study(cfg, workers=workers)
        worst = max(worst, summary.n_excluded / cfg.n_reps)
        rows += _study_rows(summary)
    _emit(_csv_text(STUDY_COLUMNS, rows), args.out)
    return EXIT_NONCONVERGENCE if worst > NONCONVERGENCE_LIMIT else EXIT_OK


def _override(cfg, args):
    kw = {}
    if args.n is not None:
        kw["n_reps"] = args.n
    if args.seed is not None:
        kw["seed"] = args.seed
    return replace(cfg, **kw)


def cmd_simulate(args) -> int:
    configs = _read(load_study, args.study, "study")
    configs = [_override(c, args) for c in configs]
    if args.k is not None:
        configs = [replace(c, K=args.k) for c in configs]
        if configs[0].kind != "shear":
            configs = configs[:1]
    if args.lam is not None:
        configs = [replace(configs[0], lam=args.lam)]
    return _run_studies(configs, args)


def _sweep(kind, args, *, plugin=False, track=montecarlo.DEFAULT_TRACK):
    n = DEFAULT_REPS if args.n is None else args.n
    seed = 0 if args.seed is None else args.seed
    if kind == "shear":
        lams = SHEAR_LAMBDAS if args.lam is None else (args.lam,)
        K = 9 if args.k is None else args.k
        return [StudyConfig(kind=kind, K=K, lam=lam, n_reps=n, seed=seed, plugin=plugin, track=track) for lam in lams]
    Ks = ROTATION_KS if args.k is None else (args.k,)
    return [StudyConfig(kind=kind, K=K, n_reps=n, seed=seed, track=track) for K in Ks]


def _reproduce_qq(args) -> int:
    n = QQ_DRAWS if args.n is None else args.n
    seed = 0 if args.seed is None else args.seed
    rows = []
    for series, draws in montecarlo.simulate_localizations(n=n, seed=seed).items():
        t, x = montecarlo.qq_points(draws)
        for j in range(n):
            rows.append(["qq", series, j + 1, (j + 1) / (n + 1), t[j], x[j]])
    header = ["study_kind", "series", "j", "p_j", "normal_quantile", "ordered_value"]
    _emit(_csv_text(header, rows), args.out)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    which = args.which
    if which == "qq":
        return _reproduce_qq(args)
    if which == "plugin":
        configs = _sweep("shear", args, plugin=True, track=("x2F_1",))
    elif which == "lowsnr":
        configs = _sweep("lowsnr", args, track=("x2F_1", "a11"))
    elif which == "correlated":
        configs = _sweep("correlated", args, track=("x2F_1",))
    else:
        configs = _sweep(which, args)
    return _run_studies(configs, args)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regbound", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output CSV (default: stdout)")
        sp.add_argument("--threads", type=int, help="worker processes (env REGBOUND_THREADS)")

    sp = sub.add_parser("crlb", help="square-root CRLB table for a scenario")
    sp.add_argument("--scenario", required=True)
    common(sp)
    sp.set_defaults(func=cmd_crlb)

    sp = sub.add_parser("fit", help="ML fit of A and s to measured CP pairs")
    sp.add_argument("--scenario", required=True, help="supplies the covariance model")
    sp.add_argument("--data", required=True)
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sweep_flags = (
        ("--n", dict(type=int, help="replications per study")),
        ("--seed", dict(type=int)),
        ("--k", dict(type=int, help="number of control points")),
        ("--lambda", dict(type=float, dest="lam", help="shear parameter")),
    )
    sp = sub.add_parser("simulate", help="run the studies described by a study file")
    sp.add_argument("--study", required=True)
    for flag, kw in sweep_flags:
        sp.add_argument(flag, **kw)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reproduce", help="run a built-in simulation design")
    sp.add_argument("which", choices=["rotation", "shear", "lowsnr", "plugin", "qq", "correlated"])
    for flag, kw in sweep_flags:
        sp.add_argument(flag, **kw)
    common(sp)
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _check_out(args.out)
        if getattr(args, "n", None) is not None and args.n < 2:
            raise UsageError("--n must be at least 2")
        return args.func(args)
    except UsageError as exc:
        print(f"regbound: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (InvalidScenario, DegenerateDesign, AssumptionViolated, ValueError) as exc:
        print(f"regbound: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except SingularFim as exc:
        print(f"regbound: singular Fisher information: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except NonConvergence as exc:
        print(f"regbound: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
