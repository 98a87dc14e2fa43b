"""Radial grid topology, line parameters and the nodal admittance matrix.

Everything here works in per-unit. Conversion to and from ohms happens
through :class:`PerUnitBase` at the I/O boundary.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadSlack,
    CyclicGraph,
    DimensionMismatch,
    Disconnected,
    ZeroImpedance,
)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridTopology:
    """Node/line graph of a radial grid.

    Attributes
    ----------
    n_nodes : int
        Number of nodes N.
    slack : int
        0-based index of the angle/voltage reference node.
    lines : tuple of (int, int)
        ``(top, bottom)`` node pairs, one per line, in line order.
    incidence : ndarray, shape (L, N)
        Branch-to-node matrix, +1 at the top node and -1 at the bottom node.
    """

    n_nodes: int
    slack: int
    lines: tuple
    incidence: np.ndarray = field(repr=False)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def non_slack(self) -> np.ndarray:
        return np.array([k for k in range(self.n_nodes) if k != self.slack], dtype=int)

    @property
    def tops(self) -> np.ndarray:
        return np.array([a for a, _ in self.lines], dtype=int)

    @property
    def bottoms(self) -> np.ndarray:
        return np.array([b for _, b in self.lines], dtype=int)


@dataclass(frozen=True)
class LineParams:
    """Series resistance and reactance of every line (same unit for both)."""

    r: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        r = _frozen(self.r)
        x = _frozen(self.x)
        if r.ndim != 1 or r.shape != x.shape:
            raise DimensionMismatch(f"R and X must be equal-length vectors, got {r.shape} and {x.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(x))):
            raise ValueError("line parameters must be finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "x", x)

    @property
    def n_lines(self) -> int:
        return self.r.size

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    def as_vector(self) -> np.ndarray:
        """Return ``[R_1..R_L, X_1..X_L]``."""
        return np.concatenate([self.r, self.x])

    @classmethod
    def from_vector(cls, v) -> "LineParams":
        v = np.asarray(v, dtype=float)
        n = v.size // 2
        return cls(v[:n].copy(), v[n:2 * n].copy())

    def scaled(self, factor) -> "LineParams":
        return LineParams(self.r * factor, self.x * factor)


@dataclass(frozen=True)
class AdmittanceModel:
    """Nodal admittance matrix with its polar form cached."""

    y: np.ndarray
    magnitude: np.ndarray = field(repr=False)
    angle: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, y) -> "AdmittanceModel":
        y = _frozen(y, dtype=complex)
        return cls(y, _frozen(np.abs(y)), _frozen(np.angle(y)))


@dataclass(frozen=True)
class PerUnitBase:
    s_base: float  # VA
    v_base: float  # V

    def __post_init__(self):
        if not (self.s_base > 0 and self.v_base > 0):
            raise ValueError("per-unit bases must be strictly positive")

    @property
    def z_base(self) -> float:
        return self.v_base ** 2 / self.s_base


def build_topology(lines, slack: int, n_nodes: int | None = None) -> GridTopology:
    """Validate a radial line list and build its incidence matrix.

    Parameters
    ----------
    lines : sequence of (int, int)
        0-based ``(top, bottom)`` node pairs.
    slack : int
        Reference node.
    n_nodes : int, optional
        Node count; inferred as ``max index + 1`` when omitted.

    Raises
    ------
    CyclicGraph, Disconnected, BadSlack
    """
    lines = tuple((int(a), int(b)) for a, b in lines)
    if not lines:
        raise Disconnected("a grid needs at least one line")
    if n_nodes is None:
        n_nodes = 1 + max(max(a, b) for a, b in lines)
    if min(min(a, b) for a, b in lines) < 0 or max(max(a, b) for a, b in lines) >= n_nodes:
        raise DimensionMismatch("line endpoint outside 0..N-1")
    if not 0 <= slack < n_nodes:
        raise BadSlack(f"slack index {slack} outside 0..{n_nodes - 1}")

    parent = list(range(n_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for l, (a, b) in enumerate(lines):
        ra, rb = find(a), find(b)
        if ra == rb:
            raise CyclicGraph(f"line {l} ({a}, {b}) closes a loop")
        parent[ra] = rb

    adjacency = [[] for _ in range(n_nodes)]
    for a, b in lines:
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen = {slack}
    queue = deque([slack])
    while queue:
        k = queue.popleft()
        for j in adjacency[k]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    if len(seen) != n_nodes:
        missing = sorted(set(range(n_nodes)) - seen)
        raise Disconnected(f"nodes {missing} are not reachable from the slack")

    a_mat = np.zeros((len(lines), n_nodes))
    for l, (top, bottom) in enumerate(lines):
        a_mat[l, top] = 1.0
        a_mat[l, bottom] = -1.0
    return GridTopology(n_nodes, int(slack), lines, _frozen(a_mat))


def _check_params(topo: GridTopology, params: LineParams):
    if params.n_lines != topo.n_lines:
        raise DimensionMismatch(f"{params.n_lines} line parameters for {topo.n_lines} lines")
    z2 = params.r ** 2 + params.x ** 2
    if np.any(z2 == 0):
        bad = np.flatnonzero(z2 == 0).tolist()
        raise ZeroImpedance(f"lines {bad} have zero impedance")
    return z2


def build_admittance(topo: GridTopology, params: LineParams) -> AdmittanceModel:
    """Nodal admittance ``A^T diag(1/Z) A`` of a shunt-free grid."""
    z2 = _check_params(topo, params)
    y_pr = (params.r - 1j * params.x) / z2
    a = topo.incidence
    y = a.T @ (y_pr[:, None] * a)
    return AdmittanceModel.from_matrix(y)


def to_per_unit(params_ohm: LineParams, base: PerUnitBase) -> LineParams:
    return LineParams(params_ohm.r / base.z_base, params_ohm.x / base.z_base)


def to_ohm(params_pu: LineParams, base: PerUnitBase) -> LineParams:
    return LineParams(params_pu.r * base.z_base, params_pu.x * base.z_base)
