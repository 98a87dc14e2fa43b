"""File formats. All files carry SI units and 1-based node numbers.

Topology JSON::

    {"nodes": 4, "slack": 1,
     "node_names": ["feeder", "PM1", "PM2", "PM3"],          # optional
     "lines": [{"id": 1, "from": 1, "to": 2, "r_ohm": 0.15, "x_ohm": 0.1414}, ...]}

Snapshot CSV columns: ``t, node, p_w, q_var, vmag_v, theta_rad`` with one
row per (t, node); ``theta_rad`` is empty when no angle was measured.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_model import GridTopology, LineParams, PerUnitBase, build_topology, to_ohm
from .power_flow import Snapshot

SNAPSHOT_COLUMNS = ("t", "node", "p_w", "q_var", "vmag_v", "theta_rad")


@dataclass(frozen=True)
class TopologyFile:
    topology: GridTopology
    datasheet_ohm: LineParams
    line_ids: tuple
    node_names: tuple


def load_topology(path) -> TopologyFile:
    with open(path) as fh:
        data = json.load(fh)
    return topology_from_dict(data)


def topology_from_dict(data) -> TopologyFile:
    try:
        nodes = data["nodes"]
        n = len(nodes) if isinstance(nodes, list) else int(nodes)
        names = tuple(nodes) if isinstance(nodes, list) else tuple(data.get("node_names", [str(k + 1) for k in range(n)]))
        lines = data["lines"]
        pairs = [(int(ln["from"]) - 1, int(ln["to"]) - 1) for ln in lines]
        ids = tuple(ln.get("id", i + 1) for i, ln in enumerate(lines))
        r = [float(ln["r_ohm"]) for ln in lines]
        x = [float(ln["x_ohm"]) for ln in lines]
        slack = int(data["slack"]) - 1
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed topology file: missing or bad field {exc}") from exc
    topo = build_topology(pairs, slack, n_nodes=n)
    return TopologyFile(topo, LineParams(r, x), ids, names)


def topology_to_dict(topo: GridTopology, params_ohm: LineParams, line_ids=None, node_names=None) -> dict:
    line_ids = line_ids or [l + 1 for l in range(topo.n_lines)]
    out = {"nodes": topo.n_nodes, "slack": topo.slack + 1, "lines": []}
    if node_names:
        out["node_names"] = list(node_names)
    for l, (a, b) in enumerate(topo.lines):
        out["lines"].append({"id": line_ids[l], "from": a + 1, "to": b + 1,
                             "r_ohm": float(params_ohm.r[l]), "x_ohm": float(params_ohm.x[l])})
    return out


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_snapshot_table(path, rows):
    """Write SI rows ``(t, node, p_w, q_var, vmag_v, theta_rad or None)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_COLUMNS)
        for t, node, p, q, vm, th in rows:
            w.writerow([t, int(node), _fmt(p), _fmt(q), _fmt(vm), "" if th is None else _fmt(th)])


def read_snapshot_table(path):
    """Rows of the snapshot CSV as ``(t, node, p_w, q_var, vmag_v, theta_rad or None)``."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SNAPSHOT_COLUMNS[:5]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"snapshot CSV lacks columns {sorted(missing)}")
        for rec in reader:
            th = (rec.get("theta_rad") or "").strip()
            rows.append((rec["t"], int(rec["node"]), float(rec["p_w"]), float(rec["q_var"]),
                         float(rec["vmag_v"]), float(th) if th else None))
    return rows


def write_snapshots_csv(path, snapshots, base: PerUnitBase):
    rows = []
    for s in snapshots:
        for k in range(s.vmag.size):
            rows.append((s.t, k + 1, s.p[k] * base.s_base, s.q[k] * base.s_base, s.vmag[k] * base.v_base,
                         None if s.theta is None else s.theta[k]))
    write_snapshot_table(path, rows)


def read_snapshots_csv(path, base: PerUnitBase, n_nodes: int) -> list[Snapshot]:
    """Group CSV rows by ``t`` (first-appearance order) into per-unit snapshots."""
    groups: dict[str, dict] = {}
    for t, node, p, q, vm, th in read_snapshot_table(path):
        if not 1 <= node <= n_nodes:
            raise ValueError(f"row for t={t!r} names node {node} outside 1..{n_nodes}")
        groups.setdefault(t, {})[node - 1] = (p, q, vm, th)
    snaps = []
    for t, recs in groups.items():
        if len(recs) != n_nodes:
            raise ValueError(f"snapshot {t!r} has {len(recs)} nodes, expected {n_nodes}")
        arr = [recs[k] for k in range(n_nodes)]
        thetas = [a[3] for a in arr]
        if all(v is None for v in thetas):
            theta = None
        elif any(v is None for v in thetas):
            raise ValueError(f"snapshot {t!r} has angles for only some nodes")
        else:
            theta = np.array(thetas)
        snaps.append(Snapshot(t, np.array([a[0] for a in arr]) / base.s_base,
                              np.array([a[1] for a in arr]) / base.s_base,
                              np.array([a[2] for a in arr]) / base.v_base, theta))
    return snaps


def fingerprint(snapshots) -> str:
    """SHA-256 over the snapshot data, for tying reports to their inputs."""
    h = hashlib.sha256()
    for s in snapshots:
        h.update(str(s.t).encode())
        for arr in (s.p, s.q, s.vmag):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(b"-" if s.theta is None else np.ascontiguousarray(s.theta, dtype="<f8").tobytes())
    return h.hexdigest()


def report_to_dict(report, base: PerUnitBase, snapshots, line_ids=None, scenario_name=None) -> dict:
    ohm = to_ohm(report.params, base)
    line_ids = list(line_ids) if line_ids else list(range(1, report.params.n_lines + 1))
    return {
        "method": report.method,
        "status": report.status,
        "iterations": report.iterations,
        "residual_norm_pu": report.residual_norm,
        "line_ids": line_ids,
        "params": {
            "ohm": {"r": ohm.r.tolist(), "x": ohm.x.tolist()},
            "pu": {"r": report.params.r.tolist(), "x": report.params.x.tolist()},
        },
        "thetas_rad": None if report.thetas is None else [np.asarray(t).tolist() for t in report.thetas],
        "trace": [{"iteration": r.iteration, "step_inf": r.step_inf, "residual_norm": r.residual_norm,
                   "rcond": r.rcond} for r in report.trace],
        "negative_params": report.negative_params,
        "active_bounds": list(report.active_bounds),
        "config": report.config.as_dict(),
        "base": {"s_base_va": base.s_base, "v_base_v": base.v_base},
        "scenario": scenario_name,
        "input_fingerprint": fingerprint(snapshots),
        "wall_time_s": report.wall_time,
    }


def write_json(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
