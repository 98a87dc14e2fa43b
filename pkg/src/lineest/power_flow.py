"""Forward load flow, mismatch residuals and synthetic measurement snapshots.

Injections follow the generator convention: positive P and Q flow into
the network at that node.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, MissingAngles, NoConvergence, SingularJacobian
from .grid_model import AdmittanceModel, GridTopology, LineParams, build_admittance


@dataclass(frozen=True)
class Snapshot:
    """Nodal measurements at one instant, in per-unit.

    ``theta`` is None unless angle (PMU) measurements are available.
    """

    t: str
    p: np.ndarray
    q: np.ndarray
    vmag: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        for name in ("p", "q", "vmag", "theta"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        n = self.vmag.size
        if any(getattr(self, k) is not None and getattr(self, k).shape != (n,) for k in ("p", "q", "theta")):
            raise DimensionMismatch("snapshot vectors must all have length N")
        if np.any(self.vmag <= 0):
            raise ValueError("voltage magnitudes must be positive")

    @property
    def has_angles(self) -> bool:
        return self.theta is not None

    def without_angles(self) -> "Snapshot":
        return Snapshot(self.t, self.p, self.q, self.vmag, None)


@dataclass(frozen=True)
class NoiseModel:
    vmag_rel_sigma: float = 0.0
    pq_sigma: float = 0.0  # pu, absolute
    theta_sigma: float = 0.0  # rad, absolute
    seed: int = 0

    def __post_init__(self):
        if min(self.vmag_rel_sigma, self.pq_sigma, self.theta_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.vmag_rel_sigma == 0 and self.pq_sigma == 0 and self.theta_sigma == 0


@dataclass(frozen=True)
class Injection:
    """One schedule entry: nodal injections in pu (slack entry is ignored)."""

    label: str
    p: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class LoadFlowConfig:
    tol: float = 1e-10
    max_iter: int = 30


def solve_load_flow(topo: GridTopology, params: LineParams, p, q, slack_voltage: complex = 1.0,
                    config: LoadFlowConfig | None = None, admittance: AdmittanceModel | None = None):
    """Newton-Raphson load flow with every non-slack node as a PQ node.

    Returns
    -------
    vmag, theta : ndarray
        Voltage magnitudes (pu) and angles (rad) at every node.
    """
    config = config or LoadFlowConfig()
    y = (admittance or build_admittance(topo, params)).y
    n = topo.n_nodes
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (n,) or q.shape != (n,):
        raise DimensionMismatch("injection vectors must have length N")
    v0 = complex(slack_voltage)
    if abs(v0) <= 0:
        raise ValueError("slack voltage magnitude must be positive")

    pq = topo.non_slack
    m = pq.size
    s_spec = (p + 1j * q)[pq]
    vm = np.ones(n)
    va = np.zeros(n)
    vm[topo.slack] = abs(v0)
    va[topo.slack] = np.angle(v0)
    va[pq] = np.angle(v0)

    mism = np.inf
    for it in range(config.max_iter + 1):
        v = vm * np.exp(1j * va)
        i_bus = y @ v
        s = v * np.conj(i_bus)
        d = s[pq] - s_spec
        f = np.concatenate([d.real, d.imag])
        mism = np.max(np.abs(f)) if m else 0.0
        if mism < config.tol:
            return vm, va
        if it == config.max_iter:
            break
        dv = v / vm
        ds_dva = 1j * v[:, None] * np.conj(np.diag(i_bus) - y * v[None, :])
        ds_dvm = v[:, None] * np.conj(y * dv[None, :]) + np.diag(np.conj(i_bus) * dv)
        a = ds_dva[np.ix_(pq, pq)]
        b = ds_dvm[np.ix_(pq, pq)]
        jac = np.block([[a.real, b.real], [a.imag, b.imag]])
        try:
            lu = scipy.linalg.lu_factor(jac, check_finite=True)
        except (ValueError, scipy.linalg.LinAlgError) as exc:
            raise SingularJacobian(f"load-flow Jacobian not factorizable: {exc}") from exc
        if np.any(np.diag(lu[0]) == 0):
            raise SingularJacobian("load-flow Jacobian is singular", rcond=0.0)
        step = -scipy.linalg.lu_solve(lu, f)
        va[pq] += step[:m]
        vm[pq] += step[m:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            break
    raise NoConvergence(f"load flow did not converge (max mismatch {mism:.3e} pu)",
                        iterations=config.max_iter, mismatch=float(mism))


def power_injections(admittance: AdmittanceModel, vmag, theta):
    """Nodal P and Q implied by voltages, using the polar power-flow sums."""
    y_abs = admittance.magnitude
    delta = theta[:, None] - theta[None, :] - admittance.angle
    w = vmag[:, None] * vmag[None, :] * y_abs
    return np.sum(w * np.cos(delta), axis=1), np.sum(w * np.sin(delta), axis=1)


def mismatch(topo: GridTopology, params: LineParams, snapshot: Snapshot, theta=None,
             include_slack: bool = False, admittance: AdmittanceModel | None = None) -> np.ndarray:
    """Residuals ``[dP_k..., dQ_k...]`` over non-slack nodes.

    ``dP_k = -P_k + sum_j |V_k||V_j||Y_kj| cos(theta_k - theta_j - phi_kj)``
    and likewise for Q with sin. Angles come from ``theta`` when given,
    otherwise from the snapshot.
    """
    if theta is None:
        theta = snapshot.theta
    if theta is None:
        raise MissingAngles(f"snapshot {snapshot.t!r} has no angles and none were supplied")
    theta = np.asarray(theta, dtype=float)
    adm = admittance or build_admittance(topo, params)
    p_calc, q_calc = power_injections(adm, snapshot.vmag, theta)
    rows = np.arange(topo.n_nodes) if include_slack else topo.non_slack
    return np.concatenate([p_calc[rows] - snapshot.p[rows], q_calc[rows] - snapshot.q[rows]])


def two_instance_schedule(topo: GridTopology, nodes, p: float, q: float, ratio: float = -1.0):
    """Two entries: ``(p, q)`` at ``nodes`` and then ``ratio`` times that."""
    out = []
    for label, scale in (("t1", 1.0), ("t2", ratio)):
        pv = np.zeros(topo.n_nodes)
        qv = np.zeros(topo.n_nodes)
        pv[list(nodes)] = p * scale
        qv[list(nodes)] = q * scale
        out.append(Injection(label, pv, qv))
    return out


def grid_schedule(topo: GridTopology, nodes, p_values, q_values):
    """All ``(P, Q)`` combinations, each applied identically at ``nodes``."""
    out = []
    for i, (pk, qk) in enumerate(itertools.product(p_values, q_values)):
        pv = np.zeros(topo.n_nodes)
        qv = np.zeros(topo.n_nodes)
        pv[list(nodes)] = pk
        qv[list(nodes)] = qk
        out.append(Injection(f"t{i + 1}", pv, qv))
    return out


def synthesize_snapshots(topo: GridTopology, true_params: LineParams, schedule, noise: NoiseModel | None = None,
                         slack_voltage: complex = 1.0, pmu: bool = False,
                         config: LoadFlowConfig | None = None) -> list[Snapshot]:
    """Run a load flow per schedule entry and return (optionally noisy) snapshots.

    Entry ``i`` draws its noise from the substream ``(noise.seed, i)`` so the
    result does not depend on evaluation order.
    """
    if not schedule:
        raise ValueError("empty injection schedule")
    noise = noise or NoiseModel()
    adm = build_admittance(topo, true_params)
    ns = topo.non_slack
    snaps = []
    for i, inj in enumerate(schedule):
        vm, va = solve_load_flow(topo, true_params, inj.p, inj.q, slack_voltage, config, admittance=adm)
        va = va - va[topo.slack]
        p, q = power_injections(adm, vm, va)
        theta = va.copy() if pmu else None
        if not noise.is_zero:
            rng = np.random.default_rng([noise.seed, i])
            vm = vm * (1.0 + noise.vmag_rel_sigma * rng.standard_normal(vm.size))
            p = p + noise.pq_sigma * rng.standard_normal(p.size)
            q = q + noise.pq_sigma * rng.standard_normal(q.size)
            th_noise = noise.theta_sigma * rng.standard_normal(va.size)
            if theta is not None:
                theta[ns] += th_noise[ns]
        snaps.append(Snapshot(inj.label, p, q, vm, theta))
    return snaps
