"""Line-parameter estimators.

Four solvers share the residuals and analytical Jacobian of
:mod:`lineest.sensitivity`:

* ``nr-square``  -- Newton-Raphson on one PMU snapshot (2(N-1) x 2L system)
* ``nr-rms``     -- Newton-Raphson on two RMS-only snapshots, angles unknown
* ``nr-ls``      -- Newton-Raphson where each step is a linear least-squares solve
* ``bounded-ls`` -- trust-region reflective least squares with R, X > 0
"""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares

from .errors import (
    AngleGuessWarning,
    BoundActiveWarning,
    DimensionMismatch,
    MissingAngleGuess,
    NegativeParamsWarning,
    NoConvergence,
    RankDeficient,
    SingularJacobian,
)
from .grid_model import GridTopology, LineParams
from .power_flow import LoadFlowConfig, solve_load_flow
from .sensitivity import (
    Regime,
    assemble_jacobian,
    pack_unknowns,
    reciprocal_condition,
    stacked_residuals,
    unknown_labels,
    unpack_unknowns,
)

PARAM_LOWER_BOUND = 1e-9  # pu, stands in for the strict R, X > 0


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``tol`` applies to the infinity norm of the full Newton step. A Newton
    run only stops once the residual norm has also stagnated (relative
    decrease below ``stagnation_rtol``) or dropped below ``residual_atol``,
    so small ``alpha`` cannot stop early on a still-moving iterate.
    """

    alpha: float = 1.0
    tol: float = 1e-6
    max_iter: int = 50
    regime: Regime = Regime.RMS
    include_slack_rows: bool = False
    rcond_min: float = 1e-13
    stagnation_rtol: float = 1e-3
    residual_atol: float = 1e-12
    enforce_bounds: bool = True
    tr_radius: float | None = None
    xtol: float = 1e-12
    ftol: float = 1e-12
    gtol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tr_radius is not None and self.tr_radius <= 0:
            raise ValueError("tr_radius must be positive")

    def as_dict(self):
        d = asdict(self)
        d["regime"] = self.regime.value
        return d


@dataclass(frozen=True)
class EstimationProblem:
    topology: GridTopology
    snapshots: tuple
    initial: LineParams
    initial_thetas: tuple | None = None
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        if self.initial_thetas is not None:
            object.__setattr__(self, "initial_thetas", tuple(np.asarray(t, dtype=float) for t in self.initial_thetas))
        if not self.snapshots:
            raise ValueError("at least one snapshot is required")
        if self.initial.n_lines != self.topology.n_lines:
            raise DimensionMismatch("initial guess does not match the line count")
        if self.config.regime is Regime.PMU:
            missing = [s.t for s in self.snapshots if s.theta is None]
            if missing:
                raise MissingAngleGuess(f"PMU regime but snapshots {missing} carry no angles")
        elif len(self.snapshots) < 2:
            raise ValueError("RMS-only estimation needs at least two snapshots")

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)


@dataclass
class IterationRecord:
    iteration: int
    step_inf: float
    residual_norm: float
    rcond: float


@dataclass
class EstimateReport:
    method: str
    params: LineParams
    thetas: list | None
    status: str
    iterations: int
    trace: list
    residual_norm: float
    config: SolverConfig
    wall_time: float = 0.0
    negative_params: bool = False
    active_bounds: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def initial_angles(topo: GridTopology, params: LineParams, snapshots, config: LoadFlowConfig | None = None):
    """Angle guesses from a load flow at ``params`` using each snapshot's P, Q and slack |V|.

    Falls back to flat angles (with a warning) when the load flow fails.
    """
    out = []
    for s in snapshots:
        try:
            _, va = solve_load_flow(topo, params, s.p, s.q, s.vmag[topo.slack], config)
            out.append(va - va[topo.slack])
        except (NoConvergence, SingularJacobian) as exc:
            warnings.warn(f"load flow for angle guess of {s.t!r} failed ({exc}); using flat angles",
                          AngleGuessWarning, stacklevel=2)
            out.append(np.zeros(topo.n_nodes))
    return out


def _start_angles(problem: EstimationProblem):
    if problem.config.regime is Regime.PMU:
        return None
    if problem.initial_thetas is None:
        return initial_angles(problem.topology, problem.initial, problem.snapshots)
    if len(problem.initial_thetas) != problem.n_snapshots:
        raise MissingAngleGuess("one initial angle vector per snapshot is required")
    out = []
    for th in problem.initial_thetas:
        if th.shape != (problem.topology.n_nodes,):
            raise MissingAngleGuess("initial angle vectors must have length N")
        th = th - th[problem.topology.slack]
        out.append(th)
    return out


class _System:
    """Residual/Jacobian closure over the packed unknown vector."""

    def __init__(self, problem: EstimationProblem):
        self.p = problem
        self.topo = problem.topology
        self.regime = problem.config.regime
        self.include_slack = problem.config.include_slack_rows
        self.snaps = list(problem.snapshots)

    def unpack(self, x):
        return unpack_unknowns(x, self.topo, len(self.snaps), self.regime)

    def residuals(self, x):
        params, thetas = self.unpack(x)
        return stacked_residuals(self.topo, params, self.snaps, self.regime, thetas, self.include_slack)

    def jacobian(self, x):
        params, thetas = self.unpack(x)
        return assemble_jacobian(self.topo, params, self.snaps, self.regime, thetas, self.include_slack).matrix


def _newton(problem: EstimationProblem, method: str, least_sq: bool) -> EstimateReport:
    cfg = problem.config
    t0 = time.perf_counter()
    sysm = _System(problem)
    x = pack_unknowns(problem.initial, _start_angles(problem), problem.topology)
    f = sysm.residuals(x)
    r_norm = float(np.linalg.norm(f))
    n_l = problem.topology.n_lines
    trace = []
    negative = False
    status = "no_convergence"
    for it in range(1, cfg.max_iter + 1):
        jac = sysm.jacobian(x)
        if least_sq:
            dx, rcond = _lstsq_step(jac, f, cfg.rcond_min)
        else:
            rcond = reciprocal_condition(jac)
            if rcond < cfg.rcond_min:
                raise SingularJacobian(f"Jacobian is singular at iteration {it} (RCOND {rcond:.3e})", rcond=rcond)
            dx = scipy.linalg.solve(jac, -f)
        x = x + cfg.alpha * dx
        if not negative and np.any(x[:2 * n_l] <= 0):
            negative = True
            warnings.warn(f"{method}: a line parameter became non-positive at iteration {it}",
                          NegativeParamsWarning, stacklevel=3)
        f = sysm.residuals(x)
        r_new = float(np.linalg.norm(f))
        step_inf = float(np.max(np.abs(dx)))
        trace.append(IterationRecord(it, step_inf, r_new, rcond))
        stagnant = r_new <= cfg.residual_atol or r_new >= (1.0 - cfg.stagnation_rtol) * r_norm
        r_norm = r_new
        if not np.all(np.isfinite(x)):
            break
        if step_inf <= cfg.tol and stagnant:
            status = "converged"
            break
    params, thetas = sysm.unpack(x)
    report = EstimateReport(method, params, thetas, status, len(trace), trace, r_norm, cfg,
                            time.perf_counter() - t0, negative)
    if status != "converged":
        raise NoConvergence(f"{method} did not converge in {len(trace)} iterations",
                            iterations=len(trace), mismatch=r_norm, report=report)
    return report


def _lstsq_step(jac, f, rcond_min):
    """Minimize ``||f + J dx||`` via QR with column pivoting; returns ``(dx, rcond)``."""
    m, n = jac.shape
    if m < n:
        raise RankDeficient(f"{m} residuals for {n} unknowns", rank=m, n_cols=n, rcond=0.0)
    q, r, perm = scipy.linalg.qr(jac, mode="economic", pivoting=True)
    rcond = reciprocal_condition(r)  # same singular values as J
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rcond_min * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < n:
        raise RankDeficient(f"least-squares Jacobian has numerical rank {rank} < {n}", rank=rank, n_cols=n,
                            rcond=rcond)
    z = scipy.linalg.solve_triangular(r, -(q.T @ f))
    dx = np.empty(n)
    dx[perm] = z
    return dx, rcond


def estimate_nr_square(problem: EstimationProblem) -> EstimateReport:
    """Newton-Raphson on one snapshot with measured angles."""
    if problem.config.regime is not Regime.PMU:
        problem = replace(problem, config=replace(problem.config, regime=Regime.PMU))
    if problem.n_snapshots != 1:
        raise ValueError("nr-square takes exactly one snapshot; use nr-ls for several")
    return _newton(problem, "nr-square", least_sq=False)


def estimate_nr_rms(problem: EstimationProblem) -> EstimateReport:
    """Newton-Raphson on two RMS-only snapshots; angles are extra unknowns."""
    if problem.config.regime is not Regime.RMS:
        problem = replace(problem, config=replace(problem.config, regime=Regime.RMS))
    if problem.n_snapshots != 2:
        raise ValueError("nr-rms takes exactly two snapshots; use nr-ls for more")
    if problem.config.include_slack_rows:
        raise ValueError("nr-rms solves the square system; slack rows must be dropped")
    return _newton(problem, "nr-rms", least_sq=False)


def estimate_nr_ls(problem: EstimationProblem) -> EstimateReport:
    """Newton-Raphson where each step solves a linear least-squares problem."""
    return _newton(problem, "nr-ls", least_sq=True)


def estimate_bounded_ls(problem: EstimationProblem) -> EstimateReport:
    """Bound-constrained nonlinear least squares (trust-region reflective).

    R and X are kept above ``PARAM_LOWER_BOUND``, angles inside [-pi, pi];
    slack angles are not unknowns and stay at zero. The trace holds one
    record per accepted trust-region step.
    """
    cfg = problem.config
    t0 = time.perf_counter()
    sysm = _System(problem)
    topo = problem.topology
    n_l = topo.n_lines
    x0 = pack_unknowns(problem.initial, _start_angles(problem), topo)
    n = x0.size
    lower = np.full(n, -np.pi)
    upper = np.full(n, np.pi)
    if cfg.enforce_bounds:
        lower[:2 * n_l] = PARAM_LOWER_BOUND
    else:
        lower[:2 * n_l] = -np.inf
    upper[:2 * n_l] = np.inf
    x0 = np.clip(x0, lower, upper)

    cache = {}
    trace = []
    last_x = [None]

    def fun(x):
        f = sysm.residuals(x)
        cache[x.tobytes()] = f
        return f

    def jac(x):
        # TRF re-evaluates the Jacobian only at x0 and after each accepted step
        j = sysm.jacobian(x)
        f = cache.get(x.tobytes())
        if f is None:
            f = sysm.residuals(x)
        step = 0.0 if last_x[0] is None else float(np.max(np.abs(x - last_x[0])))
        if last_x[0] is not None:
            trace.append(IterationRecord(len(trace) + 1, step, float(np.linalg.norm(f)), reciprocal_condition(j)))
        last_x[0] = x.copy()
        return j

    j0 = sysm.jacobian(x0)
    col = np.linalg.norm(j0, axis=0)
    x_scale = np.where(col > 0, 1.0 / np.where(col > 0, col, 1.0), 1.0)
    if cfg.tr_radius is not None:
        # TRF starts from radius ||x0 / x_scale||; a uniform rescale sets it
        x_scale = x_scale * (np.linalg.norm(x0 / x_scale) / cfg.tr_radius)
    res = least_squares(fun, x0, jac=jac, bounds=(lower, upper), method="trf", x_scale=x_scale,
                        xtol=cfg.xtol, ftol=cfg.ftol, gtol=cfg.gtol, max_nfev=cfg.max_iter * 10)
    params, thetas = sysm.unpack(res.x)
    labels = unknown_labels(topo, cfg.regime, problem.n_snapshots)
    active = [labels[i] for i in np.flatnonzero(res.active_mask)]
    if active:
        warnings.warn(f"bounded-ls solution sits on bounds for {active}", BoundActiveWarning, stacklevel=2)
    status = "converged" if res.status > 0 else "no_convergence"
    r_norm = float(np.linalg.norm(res.fun))
    report = EstimateReport("bounded-ls", params, thetas, status, len(trace), trace, r_norm, cfg,
                            time.perf_counter() - t0, bool(np.any(res.x[:2 * n_l] <= 0)), active)
    if status != "converged":
        raise NoConvergence(f"bounded-ls stopped without convergence: {res.message}", iterations=len(trace),
                            mismatch=r_norm, report=report)
    return report


METHODS = {
    "nr-square": estimate_nr_square,
    "nr-rms": estimate_nr_rms,
    "nr-ls": estimate_nr_ls,
    "bounded-ls": estimate_bounded_ls,
}


def estimate(problem: EstimationProblem, method: str) -> EstimateReport:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(problem)
