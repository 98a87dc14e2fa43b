"""Conditioning and robustness studies.

* :func:`rcond_sweep` -- RCOND of the two-snapshot RMS Jacobian vs power ratio r
* :func:`error_reduction` -- per-node voltage-error reduction of estimated vs datasheet parameters
* :func:`sample_count_study` -- error reduction vs number of samples used
* :func:`rho_sweep` -- recovery error when starting from ``rho * Z_true``
"""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .errors import LineEstError, NoConvergence, SingularJacobian
from .estimators import EstimationProblem, SolverConfig, estimate, initial_angles
from .grid_model import GridTopology, LineParams
from .power_flow import Injection, LoadFlowConfig, solve_load_flow, synthesize_snapshots
from .sensitivity import Regime, assemble_jacobian, reciprocal_condition

RCOND_SINGULAR = 1e-10
RECOVERY_TOL_PCT = 1.0
LS_METHODS = ("nr-ls", "bounded-ls")


def default_r_grid():
    return np.round(np.linspace(-0.1, 1.1, 121), 10)


def default_rho_grid():
    return np.logspace(-2, 2, 17)


@dataclass
class DiagnosticsReport:
    sweep: str
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, key, **where):
        return np.array([r[key] for r in self.records if all(r.get(k) == v for k, v in where.items())],
                        dtype=float)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"sweep": self.sweep, "meta": self.meta, "records": self.records}, fh, indent=2,
                      sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_plot_csv(path, x_name, x_values, series: dict):
    """Wide CSV: one x column followed by one column per series."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([x_name, *series])
        for i, x in enumerate(x_values):
            w.writerow([repr(float(x)), *(repr(float(v[i])) for v in series.values())])


def _map(fn, items, jobs):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _rcond_point(r, topo, truth, datasheet, p_base, q_base, slack_voltage, scaled_first):
    base_inj = Injection("t1", p_base, q_base)
    scaled = Injection("t2", r * p_base, r * q_base)
    sched = [scaled, base_inj] if scaled_first else [base_inj, scaled]
    rec = {"r": float(r)}
    try:
        snaps = synthesize_snapshots(topo, truth, sched, slack_voltage=slack_voltage)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            thetas = initial_angles(topo, datasheet, snaps)
        jac = assemble_jacobian(topo, datasheet, snaps, Regime.RMS, thetas).matrix
        rc = reciprocal_condition(jac)
        rec.update(rcond=rc, status="singular" if rc < RCOND_SINGULAR else "ok")
    except (NoConvergence, SingularJacobian) as exc:
        rec.update(rcond=float("nan"), status=f"load_flow_failed: {exc}")
    return rec


def rcond_sweep(topo: GridTopology, truth: LineParams, datasheet: LineParams, p_base, q_base, r_grid=None,
                slack_voltage: complex = 1.0, scaled_first: bool = False, jobs: int = 1) -> DiagnosticsReport:
    """RCOND of the first-iterate RMS Jacobian for ``P(t2) = r P(t1)``.

    Measurements come from a load flow at ``truth``; the Jacobian is taken
    at the datasheet parameters with load-flow angle guesses, as a first
    Newton iterate would see it. ``scaled_first`` scales t1 instead of t2.
    """
    r_grid = default_r_grid() if r_grid is None else np.asarray(r_grid, dtype=float)
    if r_grid.size == 0 or not np.all(np.isfinite(r_grid)):
        raise ValueError("r grid must be nonempty and finite")
    fn = partial(_rcond_point, topo=topo, truth=truth, datasheet=datasheet, p_base=np.asarray(p_base, float),
                 q_base=np.asarray(q_base, float), slack_voltage=slack_voltage, scaled_first=scaled_first)
    return DiagnosticsReport("rcond", _map(fn, list(r_grid), jobs), {"singular_threshold": RCOND_SINGULAR})


@dataclass
class ErrorReduction:
    percent: np.ndarray  # per node; NaN where undefined (slack, no valid snapshots)
    datasheet_error: np.ndarray
    estimated_error: np.ndarray
    failed: list  # snapshot labels whose load flow failed


def error_reduction(topo: GridTopology, params_datasheet: LineParams, params_estimated: LineParams, snapshots,
                    config: LoadFlowConfig | None = None) -> ErrorReduction:
    """Per-node percentage reduction of the mean |V_meas - V_loadflow|.

    Each snapshot is replayed by load flow with its measured P, Q and slack
    voltage under both parameter sets. Snapshots where either load flow
    fails are dropped; a node with no usable snapshot, or with zero
    datasheet error, gets NaN.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("at least one snapshot is required")
    err_ds, err_est, failed = [], [], []
    for s in snapshots:
        try:
            v_ds, _ = solve_load_flow(topo, params_datasheet, s.p, s.q, s.vmag[topo.slack], config)
            v_est, _ = solve_load_flow(topo, params_estimated, s.p, s.q, s.vmag[topo.slack], config)
        except (NoConvergence, SingularJacobian):
            failed.append(s.t)
            continue
        err_ds.append(np.abs(s.vmag - v_ds))
        err_est.append(np.abs(s.vmag - v_est))
    n = topo.n_nodes
    if not err_ds:
        nan = np.full(n, np.nan)
        return ErrorReduction(nan, nan.copy(), nan.copy(), failed)
    e_ds = np.mean(err_ds, axis=0)
    e_est = np.mean(err_est, axis=0)
    pct = np.full(n, np.nan)
    ok = e_ds > 0
    ok[topo.slack] = False
    pct[ok] = (e_ds[ok] - e_est[ok]) / e_ds[ok] * 100.0
    return ErrorReduction(pct, e_ds, e_est, failed)


def _default_configs():
    return {"nr-ls": SolverConfig(alpha=0.1, max_iter=1000), "bounded-ls": SolverConfig(max_iter=200)}


def _run(problem, method):
    """Estimate without raising; returns ``(params or None, status)``."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = estimate(problem, method)
        return rep.params, rep.status
    except NoConvergence as exc:
        return (exc.report.params if exc.report else None), "no_convergence"
    except SingularJacobian as exc:
        return None, f"singular ({type(exc).__name__}, rcond={exc.rcond:.3g})"
    except (LineEstError, ValueError, FloatingPointError) as exc:
        return None, f"failed: {exc}"


def _sample_point(count, topo, datasheet, snapshots, order, methods, configs):
    chosen = [snapshots[i] for i in order[:count]]
    out = []
    for m in methods:
        rec = {"count": int(count), "method": m}
        cfg = configs[m]
        try:
            problem = EstimationProblem(topo, chosen, datasheet, config=cfg)
        except (LineEstError, ValueError) as exc:
            rec.update(status=f"failed: {exc}")
            out.append(rec)
            continue
        params, status = _run(problem, m)
        rec["status"] = status
        if params is not None and status == "converged":
            er = error_reduction(topo, datasheet, params, snapshots)
            rec["reduction_pct"] = [None if np.isnan(v) else float(v) for v in er.percent]
            rec["mean_reduction_pct"] = float(np.nanmean(er.percent))
            rec["r_pu"] = params.r.tolist()
            rec["x_pu"] = params.x.tolist()
        out.append(rec)
    return out


def sample_count_study(topo: GridTopology, datasheet: LineParams, snapshots, counts=None, seed: int = 0,
                       methods=LS_METHODS, configs: dict | None = None, jobs: int = 1) -> DiagnosticsReport:
    """Error reduction as a function of the number of samples fed to each LS estimator.

    Samples are taken in a seeded random order; the first ``count`` of
    them are used for estimation and the reduction is evaluated on all
    snapshots.
    """
    snapshots = list(snapshots)
    m = len(snapshots)
    if m < 2:
        raise ValueError("sample-count study needs at least two snapshots")
    counts = list(range(2, m + 1)) if counts is None else [int(c) for c in counts]
    if any(c < 1 or c > m for c in counts):
        raise ValueError(f"counts must lie in 1..{m}")
    configs = {**_default_configs(), **(configs or {})}
    order = np.random.default_rng(seed).permutation(m)
    fn = partial(_sample_point, topo=topo, datasheet=datasheet, snapshots=snapshots, order=order,
                 methods=tuple(methods), configs=configs)
    records = [r for rs in _map(fn, counts, jobs) for r in rs]
    return DiagnosticsReport("samples", records, {"seed": seed, "order": order.tolist()})


def _rho_point(rho, topo, truth, snapshots, methods, configs):
    out = []
    for m in methods:
        problem = EstimationProblem(topo, snapshots, truth.scaled(rho), config=configs[m])
        params, status = _run(problem, m)
        rec = {"rho": float(rho), "method": m, "status": status}
        if params is not None:
            r_err = float(np.max(np.abs(params.r / truth.r - 1.0)) * 100.0)
            x_err = float(np.max(np.abs(params.x / truth.x - 1.0)) * 100.0)
        else:
            r_err = x_err = float("nan")
        rec.update(max_r_error_pct=r_err, max_x_error_pct=x_err,
                   recovered=bool(status == "converged" and max(r_err, x_err) < RECOVERY_TOL_PCT))
        out.append(rec)
    return out


def rho_sweep(topo: GridTopology, truth: LineParams, snapshots, rho_grid=None, methods=LS_METHODS,
              configs: dict | None = None, jobs: int = 1) -> DiagnosticsReport:
    """Maximum R and X recovery error over lines when starting from ``rho * truth``.

    ``recovered`` is true only for a converged run within 1% of truth;
    everything else is reported with its status rather than dropped.
    """
    rho_grid = default_rho_grid() if rho_grid is None else np.asarray(rho_grid, dtype=float)
    if rho_grid.size == 0 or not np.all(np.isfinite(rho_grid)) or np.any(rho_grid <= 0):
        raise ValueError("rho grid must be nonempty, finite and positive")
    configs = {**_default_configs(), **(configs or {})}
    fn = partial(_rho_point, topo=topo, truth=truth, snapshots=list(snapshots), methods=tuple(methods),
                 configs=configs)
    records = [r for rs in _map(fn, list(rho_grid), jobs) for r in rs]
    return DiagnosticsReport("rho", records, {"recovery_tol_pct": RECOVERY_TOL_PCT})
