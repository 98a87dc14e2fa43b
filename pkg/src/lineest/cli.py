"""Command-line front end.

Exit codes
----------
0  success
2  configuration or usage error
3  load-flow failure while generating measurements
4  estimator did not converge (the report is still written)
5  singular Jacobian (RCOND in the error payload)
6  Jacobian check failed
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .diagnostics import (
    LS_METHODS,
    RCOND_SINGULAR,
    default_rho_grid,
    rcond_sweep,
    rho_sweep,
    sample_count_study,
    write_plot_csv,
)
from .errors import LineEstError, NoConvergence, SingularJacobian
from .estimators import METHODS, EstimationProblem, SolverConfig, estimate, initial_angles
from .grid_model import to_ohm
from .power_flow import synthesize_snapshots
from .io import fingerprint, report_to_dict, write_json, write_snapshots_csv
from .scenario import ScenarioError, load_scenario
from .sensitivity import Regime, fd_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LOAD_FLOW = 3
EXIT_NO_CONVERGENCE = 4
EXIT_SINGULAR = 5
EXIT_CHECK_FAILED = 6


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.extra = extra

    def payload(self):
        out = {"error": self.kind, "message": str(self), "exit_code": self.code}
        out.update(self.extra)
        return out


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _scenario(args):
    sc = load_scenario(args.scenario, seed=args.seed, output_dir=args.out)
    if getattr(args, "measurements", None):
        sc.data.pop("schedule", None)
        sc.data["measurements"] = str(Path(args.measurements).resolve())
    if getattr(args, "pmu", None):
        sc.data["pmu"] = True
    return sc


def _snapshots(sc, noiseless=False):
    try:
        return sc.snapshots(noiseless=noiseless)
    except (NoConvergence, SingularJacobian) as exc:
        raise CliError(EXIT_LOAD_FLOW, "load_flow_failed", f"measurement synthesis failed: {exc}") from exc


def _pick(snapshots, spec):
    if not spec:
        return snapshots
    idx = [int(s) - 1 for s in spec.split(",")]
    if any(i < 0 or i >= len(snapshots) for i in idx):
        raise ScenarioError(f"--snapshots indices must lie in 1..{len(snapshots)}")
    return [snapshots[i] for i in idx]


# -- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc = _scenario(args)
    if not sc.has_schedule:
        raise ScenarioError("simulate needs a scenario with an injection schedule")
    snaps = _snapshots(sc, noiseless=args.noiseless)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_snapshots_csv(out / "snapshots.csv", snaps, sc.base)
    truth = to_ohm(sc.truth(), sc.base)
    write_json(out / "simulation.json", {
        "scenario": sc.name,
        "seed": sc.seed,
        "snapshots": len(snaps),
        "pmu": sc.pmu,
        "truth_ohm": {"r": truth.r.tolist(), "x": truth.x.tolist()},
        "input_fingerprint": fingerprint(snaps),
    })
    _say(args, f"wrote {len(snaps)} snapshots to {out / 'snapshots.csv'}")
    return EXIT_OK


def _config(sc, args, method) -> SolverConfig:
    cfg = sc.solver_config(method)
    over = {k: v for k, v in (("alpha", args.alpha), ("tol", args.tol), ("max_iter", args.max_iter)) if v is not None}
    if args.include_slack_rows:
        over["include_slack_rows"] = True
    if method == "nr-square" or (method in LS_METHODS and sc.pmu):
        over["regime"] = Regime.PMU
    if method == "nr-rms":
        over["regime"] = Regime.RMS
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def _truth_errors(sc, report, snaps):
    """Parameter and angle errors against the scenario truth, for synthetic data only."""
    if "measurements" in sc.data or "truth" not in sc.data:
        return None
    truth = sc.truth()
    out = {"max_r_error_pct": float(np.max(np.abs(report.params.r / truth.r - 1)) * 100),
           "max_x_error_pct": float(np.max(np.abs(report.params.x / truth.x - 1)) * 100)}
    if report.thetas is not None:
        true_snaps = synthesize_snapshots(sc.topology, truth, sc.schedule(), None, sc.slack_voltage, pmu=True)
        ref = {s.t: s.theta for s in true_snaps}
        errs = [np.max(np.abs(th - ref[s.t])) for s, th in zip(snaps, report.thetas) if s.t in ref]
        if errs:
            out["max_angle_error_rad"] = float(max(errs))
    return out


def cmd_estimate(args) -> int:
    sc = _scenario(args)
    method = args.method or sc.method
    if method not in METHODS:
        raise ScenarioError(f"unknown method {method!r}")
    snaps = _pick(_snapshots(sc), args.snapshots)
    cfg = _config(sc, args, method)
    if cfg.regime is Regime.PMU and any(s.theta is None for s in snaps):
        raise ScenarioError(f"{method} needs voltage angles (PMU measurements); these snapshots carry magnitudes "
                            "only. Use nr-rms / nr-ls / bounded-ls, or a scenario with \"pmu\": true")
    if method == "nr-square" and len(snaps) != 1:
        raise ScenarioError(f"nr-square solves one snapshot; got {len(snaps)} (select one with --snapshots)")
    if method == "nr-rms" and len(snaps) != 2:
        raise ScenarioError(f"nr-rms solves two snapshots; got {len(snaps)} (select two with --snapshots)")
    try:
        problem = EstimationProblem(sc.topology, snaps, sc.datasheet(), config=cfg)
    except (LineEstError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc

    out = sc.output_dir
    path = out / f"estimate_{method}.json"
    code = EXIT_OK
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            report = estimate(problem, method)
        except NoConvergence as exc:
            report, code = exc.report, EXIT_NO_CONVERGENCE
            if report is None:
                raise CliError(code, "no_convergence", str(exc), iterations=exc.iterations) from exc
        except SingularJacobian as exc:
            raise CliError(EXIT_SINGULAR, type(exc).__name__, str(exc), rcond=exc.rcond) from exc
    data = report_to_dict(report, sc.base, snaps, sc.topology_file().line_ids, sc.name)
    data["seed"] = sc.seed
    data["warnings"] = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    data["truth_errors"] = _truth_errors(sc, report, snaps)
    write_json(path, data)
    _say(args, f"{method}: {report.status} after {report.iterations} iterations; report in {path}")
    if code:
        print(json.dumps({"error": "no_convergence", "message": f"{method} did not converge",
                          "exit_code": code, "report": str(path)}), file=sys.stderr)
    return code


def _rcond_summary(rep):
    r = rep.column("r")
    rc = rep.column("rcond")
    plateau = rc[(np.abs(r) > 0.05) & (np.abs(r - 1) > 0.05) & np.isfinite(rc)]
    at = {f"rcond_at_{v:g}": float(rc[np.argmin(np.abs(r - v))]) for v in (0.0, 1.0, 0.99, 1.01)}
    return {"plateau_median": float(np.median(plateau)) if plateau.size else None, **at}


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    spec = sc.sweep(args.sweep)
    jobs = args.jobs
    if args.sweep == "rcond":
        n = sc.topology.n_nodes
        nodes = [int(k) - 1 for k in spec.get("nodes", sc.data.get("schedule", {}).get("nodes",
                                                                                        [k + 1 for k in sc.topology.non_slack]))]
        p = np.zeros(n)
        q = np.zeros(n)
        p[nodes] = float(spec.get("p_w", 3000.0)) / sc.base.s_base
        q[nodes] = float(spec.get("q_var", 3000.0)) / sc.base.s_base
        grid = np.round(np.linspace(float(spec.get("r_min", -0.1)), float(spec.get("r_max", 1.1)),
                                    int(spec.get("r_points", 121))), 10)
        rep = rcond_sweep(sc.topology, sc.truth(), sc.datasheet(), p, q, grid, sc.slack_voltage, jobs=jobs)
        rep.meta.update(_rcond_summary(rep))
        write_plot_csv(out / "fig2_rcond.csv", "r", rep.column("r"), {"rcond": rep.column("rcond")})
        rep.to_json(out / "rcond_sweep.json")
        _say(args, f"rcond sweep: plateau median {rep.meta['plateau_median']:.3g}, "
                   f"r=0 {rep.meta['rcond_at_0']:.3g}, r=1 {rep.meta['rcond_at_1']:.3g}; wrote {out / 'fig2_rcond.csv'}")
        return EXIT_OK

    configs = {"nr-ls": SolverConfig(alpha=float(spec.get("nr_alpha", 0.1)), max_iter=int(spec.get("nr_max_iter", 1000))),
               "bounded-ls": SolverConfig(max_iter=int(spec.get("bls_max_iter", 200)))}
    if sc.pmu:
        configs = {k: replace(v, regime=Regime.PMU) for k, v in configs.items()}
    if args.sweep == "rho":
        snaps = _snapshots(sc, noiseless=bool(spec.get("noiseless", True)))
        grid = spec.get("values")
        if grid is None and "min" in spec:
            grid = np.logspace(np.log10(spec["min"]), np.log10(spec["max"]), int(spec.get("num", 17)))
        grid = default_rho_grid() if grid is None else np.asarray(grid, dtype=float)
        rep = rho_sweep(sc.topology, sc.truth(), snaps, grid, configs=configs, jobs=jobs)
        series = {}
        for m in LS_METHODS:
            series[f"{m}_max_r_error_pct"] = rep.column("max_r_error_pct", method=m)
            series[f"{m}_max_x_error_pct"] = rep.column("max_x_error_pct", method=m)
            series[f"{m}_recovered"] = np.array([r["recovered"] for r in rep.records if r["method"] == m], float)
        write_plot_csv(out / "fig4_rho_sweep.csv", "rho", grid, series)
        rep.to_json(out / "rho_sweep.json")
        failed = [(r["rho"], r["method"], r["status"]) for r in rep.records if not r["recovered"]]
        _say(args, f"rho sweep: {len(rep.records) - len(failed)}/{len(rep.records)} runs recovered truth; "
                   f"wrote {out / 'fig4_rho_sweep.csv'}")
        for rho, m, status in failed:
            _say(args, f"  not recovered: rho={rho:g} {m} ({status})")
        return EXIT_OK

    snaps = _snapshots(sc)
    counts = spec.get("counts")
    rep = sample_count_study(sc.topology, sc.datasheet(), snaps, counts, seed=int(spec.get("shuffle_seed", 0)),
                             configs=configs, jobs=jobs)
    counts = sorted({r["count"] for r in rep.records})
    series = {}
    nan = float("nan")
    for m in LS_METHODS:
        by_count = {r["count"]: r for r in rep.records if r["method"] == m}
        series[f"{m}_mean_reduction_pct"] = [by_count[c].get("mean_reduction_pct", nan) for c in counts]
        for k in sc.topology.non_slack:
            series[f"{m}_node{k + 1}_reduction_pct"] = [
                (by_count[c].get("reduction_pct") or [nan] * sc.topology.n_nodes)[k] for c in counts]
    series = {k: np.array([nan if v is None else v for v in vals], float) for k, vals in series.items()}
    write_plot_csv(out / "fig3_error_reduction.csv", "count", counts, series)
    rep.to_json(out / "samples_sweep.json")
    _say(args, f"samples sweep over {len(counts)} counts; wrote {out / 'fig3_error_reduction.csv'}")
    return EXIT_OK


def _corrupt(spec):
    row, col, factor = spec.split(",")

    def hook(jac):
        jac = jac.copy()
        jac[int(row), int(col)] = jac[int(row), int(col)] * float(factor) + 1e-3
        return jac
    return hook


def cmd_check_jacobian(args) -> int:
    sc = _scenario(args)
    snaps = _snapshots(sc)
    regime = Regime.PMU if sc.pmu else Regime.RMS
    params = sc.datasheet()
    thetas = None
    if regime is Regime.RMS:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            thetas = [np.asarray(t) for t in initial_angles(sc.topology, params, snaps)]
            for t in thetas:
                t -= t[sc.topology.slack]
    hook = _corrupt(args.inject_fault) if args.inject_fault else None
    try:
        rep = fd_check(sc.topology, params, snaps, regime, thetas, step=args.step, jacobian_hook=hook)
    except LineEstError as exc:
        raise CliError(EXIT_CHECK_FAILED, type(exc).__name__, f"Jacobian check could not run: {exc}") from exc
    data = rep.as_dict()
    data["regime"] = regime.value
    data["degenerate"] = bool(rep.rcond < RCOND_SINGULAR)
    data["input_fingerprint"] = fingerprint(snaps)
    if args.dump_jacobian:
        from .sensitivity import assemble_jacobian
        assemble_jacobian(sc.topology, params, snaps, regime, thetas).to_csv(args.dump_jacobian)
    write_json(sc.output_dir / "check_jacobian.json", data)
    verdict = "PASS" if rep.passed else "FAIL"
    _say(args, f"{verdict}: max relative error {rep.max_rel_error:.3e} at {rep.row_label}/{rep.col_label} "
               f"(row {rep.row}, col {rep.col}), step {rep.step:g}, rcond {rep.rcond:.3e}")
    if data["degenerate"]:
        _say(args, "note: Jacobian is numerically singular at this operating point (degenerate measurements)")
    if not rep.passed:
        print(json.dumps({"error": "jacobian_check_failed", "exit_code": EXIT_CHECK_FAILED, **data}), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _global_flags(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--scenario", default=d("district"),
                   help="scenario JSON file or bundled name (district, district-campaign)")
    p.add_argument("--seed", type=int, default=d(None), help="override the scenario seed")
    p.add_argument("--out", default=d(None), help="override the output directory")
    p.add_argument("--quiet", action="store_true", default=d(False), help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lineest", description="Estimate line impedances of a radial grid.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize measurement snapshots by load flow")
    p.add_argument("--noiseless", action="store_true", help="ignore the scenario noise model")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="run one estimator")
    p.add_argument("--method", choices=sorted(METHODS), default=None)
    p.add_argument("--measurements", help="snapshot CSV to use instead of the scenario's source")
    p.add_argument("--snapshots", help="comma-separated 1-based snapshot indices to use")
    p.add_argument("--pmu", action="store_true", default=None, help="treat measurements as angle-bearing")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--include-slack-rows", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", parents=[common], help="run a conditioning or robustness study")
    p.add_argument("--sweep", choices=("rcond", "rho", "samples"), required=True)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-jacobian", parents=[common], help="compare the analytical Jacobian with finite differences")
    p.add_argument("--measurements", help="snapshot CSV to use instead of the scenario's source")
    p.add_argument("--step", type=float, default=1e-7)
    p.add_argument("--dump-jacobian", metavar="CSV", help="write the analytical Jacobian with labels")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)  # "row,col,factor", for testing the checker
    p.set_defaults(func=cmd_check_jacobian)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return exc.code
    except (ScenarioError, LineEstError, ValueError, OSError) as exc:
        err = CliError(EXIT_CONFIG, type(exc).__name__, str(exc))
        print(json.dumps(err.payload()), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
