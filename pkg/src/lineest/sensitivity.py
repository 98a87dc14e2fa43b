"""Analytical Jacobian of the mismatch residuals w.r.t. line parameters and angles.

Unknown ordering is fixed: ``[R_1..R_L, X_1..X_L]`` followed, when angles
are unknown, by one block ``theta_k`` (non-slack nodes) per snapshot.
Residual rows per snapshot are ``[dP_k..., dQ_k...]`` over non-slack nodes
(or over all nodes when ``include_slack`` is set).
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePolar, DimensionMismatch, MissingAngleGuess
from .grid_model import GridTopology, LineParams, _check_params, build_admittance


class Regime(str, enum.Enum):
    PMU = "pmu"  # angles measured
    RMS = "rms"  # angles are unknowns


@dataclass(frozen=True)
class JacobianMatrix:
    matrix: np.ndarray
    col_labels: tuple
    row_labels: tuple = field(repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", *self.col_labels])
            for label, row in zip(self.row_labels, self.matrix):
                w.writerow([label, *(repr(float(v)) for v in row)])


def dY_dR(topo: GridTopology, params: LineParams, l: int) -> np.ndarray:
    """Derivative of the admittance matrix w.r.t. the resistance of line ``l``."""
    _check_params(topo, params)
    if not 0 <= l < topo.n_lines:
        raise IndexError(f"line {l} out of range")
    r, x = params.r[l], params.x[l]
    g = (x * x - r * r + 2j * x * r) / (r * r + x * x) ** 2
    a = topo.incidence[l]
    return np.outer(a, a) * g


def dY_dX(topo: GridTopology, params: LineParams, l: int) -> np.ndarray:
    return 1j * dY_dR(topo, params, l)


def polar_derivatives(y, dy):
    """Derivatives of ``|Y|`` and ``arg Y`` given the derivative ``dY`` of ``Y``.

    The angle derivative uses ``(Re Y Im dY - Im Y Re dY) / |Y|^2``, which
    equals the arctan chain rule but stays defined when ``Re Y = 0``.
    """
    y = np.asarray(y, dtype=complex)
    dy = np.asarray(dy, dtype=complex)
    mag = np.abs(y)
    if np.any(mag == 0):
        raise DegeneratePolar("|Y| = 0: polar derivatives undefined")
    d_mag = (y.real * dy.real + y.imag * dy.imag) / mag
    d_phi = (y.real * dy.imag - y.imag * dy.real) / mag ** 2
    return d_mag, d_phi


def unknown_labels(topo: GridTopology, regime: Regime, n_snapshots: int):
    labels = [f"R{l + 1}" for l in range(topo.n_lines)] + [f"X{l + 1}" for l in range(topo.n_lines)]
    if Regime(regime) is Regime.RMS:
        for i in range(n_snapshots):
            labels += [f"theta{k + 1}@{i + 1}" for k in topo.non_slack]
    return tuple(labels)


def residual_labels(topo: GridTopology, n_snapshots: int, include_slack: bool = False):
    nodes = range(topo.n_nodes) if include_slack else topo.non_slack
    out = []
    for i in range(n_snapshots):
        out += [f"dP{k + 1}@{i + 1}" for k in nodes] + [f"dQ{k + 1}@{i + 1}" for k in nodes]
    return tuple(out)


def pack_unknowns(params: LineParams, thetas=None, topo: GridTopology | None = None) -> np.ndarray:
    parts = [params.as_vector()]
    if thetas is not None:
        ns = topo.non_slack
        parts += [np.asarray(th, dtype=float)[ns] for th in thetas]
    return np.concatenate(parts)


def unpack_unknowns(xvec, topo: GridTopology, n_snapshots: int, regime: Regime):
    """Inverse of :func:`pack_unknowns`; returns ``(params, thetas or None)``."""
    n_l = topo.n_lines
    params = LineParams(xvec[:n_l].copy(), xvec[n_l:2 * n_l].copy())
    if Regime(regime) is Regime.PMU:
        return params, None
    ns = topo.non_slack
    m = ns.size
    if xvec.size != 2 * n_l + n_snapshots * m:
        raise DimensionMismatch("unknown vector length does not match topology and snapshot count")
    thetas = []
    for i in range(n_snapshots):
        th = np.zeros(topo.n_nodes)
        th[ns] = xvec[2 * n_l + i * m: 2 * n_l + (i + 1) * m]
        thetas.append(th)
    return params, thetas


def _snapshot_angles(snapshots, regime, thetas):
    if Regime(regime) is Regime.RMS:
        if thetas is None or len(thetas) != len(snapshots):
            raise MissingAngleGuess("RMS regime needs one angle vector per snapshot")
        return [np.asarray(t, dtype=float) for t in thetas]
    out = []
    for s in snapshots:
        if s.theta is None:
            raise MissingAngleGuess(f"PMU regime but snapshot {s.t!r} has no angles")
        out.append(s.theta)
    return out


def stacked_residuals(topo: GridTopology, params: LineParams, snapshots, regime=Regime.PMU, thetas=None,
                      include_slack: bool = False) -> np.ndarray:
    """Concatenated mismatch vectors (see :func:`lineest.power_flow.mismatch`) of all snapshots."""
    angles = _snapshot_angles(snapshots, regime, thetas)
    adm = build_admittance(topo, params)
    vmag = np.array([s.vmag for s in snapshots])
    theta = np.array(angles)
    delta = theta[:, :, None] - theta[:, None, :] - adm.angle
    w = vmag[:, :, None] * vmag[:, None, :] * adm.magnitude
    p_calc = np.sum(w * np.cos(delta), axis=2)
    q_calc = np.sum(w * np.sin(delta), axis=2)
    rows = np.arange(topo.n_nodes) if include_slack else topo.non_slack
    dp = p_calc[:, rows] - np.array([s.p for s in snapshots])[:, rows]
    dq = q_calc[:, rows] - np.array([s.q for s in snapshots])[:, rows]
    return np.concatenate([dp, dq], axis=1).ravel()


def _line_block(topo, params, adm, vmag, theta, row_nodes):
    """dP and dQ rows w.r.t. R and X, shape (T, rows, 2L), for stacked snapshots.

    ``vmag`` and ``theta`` have shape (T, N). Only the 2x2 endpoint block of
    line l depends on R_l, so each line contributes four (k, j) terms.
    """
    n_l = topo.n_lines
    r, x = params.r, params.x
    g = (x * x - r * r + 2j * x * r) / (r * r + x * x) ** 2
    tops, bots = topo.tops, topo.bottoms
    lines = np.arange(n_l)
    t_count = vmag.shape[0]
    jp = np.zeros((t_count, topo.n_nodes, 2 * n_l))
    jq = np.zeros((t_count, topo.n_nodes, 2 * n_l))
    for col_off, dy_line in ((0, g), (n_l, 1j * g)):
        for k_nodes, j_nodes, sign in ((tops, tops, 1.0), (tops, bots, -1.0),
                                       (bots, bots, 1.0), (bots, tops, -1.0)):
            d_mag, d_phi = polar_derivatives(adm.y[k_nodes, j_nodes], sign * dy_line)
            ymag = adm.magnitude[k_nodes, j_nodes]
            delta = theta[:, k_nodes] - theta[:, j_nodes] - adm.angle[k_nodes, j_nodes]
            vv = vmag[:, k_nodes] * vmag[:, j_nodes]
            cos_d, sin_d = np.cos(delta), np.sin(delta)
            # (k, col) pairs are distinct across lines, so plain += is safe
            jp[:, k_nodes, col_off + lines] += vv * (d_mag * cos_d + ymag * sin_d * d_phi)
            jq[:, k_nodes, col_off + lines] += vv * (d_mag * sin_d - ymag * cos_d * d_phi)
    return jp[:, row_nodes, :], jq[:, row_nodes, :]


def _angle_block(topo, adm, vmag, theta, row_nodes):
    """dP and dQ rows w.r.t. the non-slack angles of the same snapshot, shape (T, rows, N-1)."""
    delta = theta[:, :, None] - theta[:, None, :] - adm.angle
    w = vmag[:, :, None] * vmag[:, None, :] * adm.magnitude
    idx = np.arange(topo.n_nodes)
    ws = w * np.sin(delta)
    wc = w * np.cos(delta)
    ws[:, idx, idx] = 0.0
    wc[:, idx, idx] = 0.0
    dp = ws
    dq = -wc
    dp[:, idx, idx] = -ws.sum(axis=2)
    dq[:, idx, idx] = wc.sum(axis=2)
    cols = topo.non_slack
    return dp[:, row_nodes][:, :, cols], dq[:, row_nodes][:, :, cols]


def assemble_jacobian(topo: GridTopology, params: LineParams, snapshots, regime=Regime.PMU, thetas=None,
                      include_slack: bool = False) -> JacobianMatrix:
    """Analytical Jacobian of :func:`stacked_residuals` w.r.t. the unknowns."""
    regime = Regime(regime)
    snapshots = list(snapshots)
    angles = _snapshot_angles(snapshots, regime, thetas)
    adm = build_admittance(topo, params)
    n = topo.n_nodes
    n_l = topo.n_lines
    if any(s.vmag.size != n for s in snapshots) or any(th.size != n for th in angles):
        raise DimensionMismatch("snapshot does not match the topology size")
    vmag = np.array([s.vmag for s in snapshots])
    theta = np.array(angles)
    row_nodes = np.arange(n) if include_slack else topo.non_slack
    nr = row_nodes.size
    m = topo.non_slack.size
    t_count = len(snapshots)
    n_cols = 2 * n_l + (t_count * m if regime is Regime.RMS else 0)
    jac = np.zeros((t_count, 2 * nr, n_cols))
    jp, jq = _line_block(topo, params, adm, vmag, theta, row_nodes)
    jac[:, :nr, :2 * n_l] = jp
    jac[:, nr:, :2 * n_l] = jq
    if regime is Regime.RMS:
        dp, dq = _angle_block(topo, adm, vmag, theta, row_nodes)
        for i in range(t_count):
            c0 = 2 * n_l + i * m
            jac[i, :nr, c0:c0 + m] = dp[i]
            jac[i, nr:, c0:c0 + m] = dq[i]
    return JacobianMatrix(jac.reshape(t_count * 2 * nr, n_cols), unknown_labels(topo, regime, t_count),
                          residual_labels(topo, t_count, include_slack))


@dataclass
class FDCheckReport:
    max_rel_error: float
    row: int
    col: int
    row_label: str
    col_label: str
    step: float
    rcond: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-6

    def as_dict(self):
        return {"max_rel_error": self.max_rel_error, "row": self.row, "col": self.col,
                "row_label": self.row_label, "col_label": self.col_label, "step": self.step,
                "rcond": self.rcond, "passed": self.passed}


def _residuals_extended(topo, xvec, snapshots, regime, include_slack):
    """Stacked residuals evaluated in extended precision from the packed unknowns.

    Kept separate from the double-precision path so the finite-difference
    oracle shares no code with the analytical Jacobian.
    """
    ld = np.longdouble
    n_l = topo.n_lines
    r = xvec[:n_l]
    x = xvec[n_l:2 * n_l]
    a = topo.incidence.astype(ld)
    g = r / (r * r + x * x)
    b = -x / (r * r + x * x)
    y_re = a.T @ (g[:, None] * a)
    y_im = a.T @ (b[:, None] * a)
    ymag = np.sqrt(y_re * y_re + y_im * y_im)
    phi = np.arctan2(y_im, y_re)
    ns = topo.non_slack
    rows = np.arange(topo.n_nodes) if include_slack else ns
    out = []
    for i, snap in enumerate(snapshots):
        vm = snap.vmag.astype(ld)
        if Regime(regime) is Regime.RMS:
            th = np.zeros(topo.n_nodes, dtype=ld)
            th[ns] = xvec[2 * n_l + i * ns.size: 2 * n_l + (i + 1) * ns.size]
        else:
            th = snap.theta.astype(ld)
        delta = th[:, None] - th[None, :] - phi
        w = vm[:, None] * vm[None, :] * ymag
        p_calc = np.sum(w * np.cos(delta), axis=1)
        q_calc = np.sum(w * np.sin(delta), axis=1)
        out.append(p_calc[rows] - snap.p[rows].astype(ld))
        out.append(q_calc[rows] - snap.q[rows].astype(ld))
    return np.concatenate(out)


def finite_difference_jacobian(topo, params, snapshots, regime=Regime.PMU, thetas=None, step=1e-7,
                               include_slack=False) -> np.ndarray:
    """Central-difference Jacobian of the stacked residuals.

    Residuals are evaluated in ``np.longdouble`` so that, at the default
    step, roundoff stays well below the O(step^2) truncation error.
    """
    regime = Regime(regime)
    snapshots = list(snapshots)
    _snapshot_angles(snapshots, regime, thetas)
    x0 = pack_unknowns(params, thetas if regime is Regime.RMS else None, topo).astype(np.longdouble)
    h = np.longdouble(step)
    cols = []
    for c in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[c] += h
        xm[c] -= h
        fp = _residuals_extended(topo, xp, snapshots, regime, include_slack)
        fm = _residuals_extended(topo, xm, snapshots, regime, include_slack)
        cols.append(((fp - fm) / (2 * h)).astype(float))
    return np.column_stack(cols)


def fd_check(topo, params, snapshots, regime=Regime.PMU, thetas=None, step=1e-7, include_slack=False,
             jacobian_hook=None) -> FDCheckReport:
    """Compare the analytical Jacobian with central differences.

    Entries where both values are below 1e-9 in magnitude are skipped.
    ``jacobian_hook`` may modify the analytical matrix before comparison
    (used for fault injection).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    jm = assemble_jacobian(topo, params, snapshots, regime, thetas, include_slack)
    jac = jm.matrix.copy()
    if jacobian_hook is not None:
        jac = jacobian_hook(jac)
    jfd = finite_difference_jacobian(topo, params, snapshots, regime, thetas, step, include_slack)
    scale = np.maximum(np.abs(jac), np.abs(jfd))
    rel = np.zeros_like(scale)
    mask = scale > 1e-9
    rel[mask] = np.abs(jac - jfd)[mask] / scale[mask]
    r, c = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return FDCheckReport(float(rel[r, c]), int(r), int(c), jm.row_labels[r], jm.col_labels[c], step,
                         reciprocal_condition(jac))


def reciprocal_condition(matrix) -> float:
    """``sigma_min / sigma_max`` from singular values; 0 for an all-zero matrix."""
    s = np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0.0
    # tall matrices: smallest of the min(m, n) singular values; wide ones are rank deficient
    m, n = np.shape(matrix)
    if m < n:
        return 0.0
    return float(s[-1] / s[0])
