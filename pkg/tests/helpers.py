"""Shared builders for tests."""
import numpy as np

from lineest.grid_model import LineParams, build_topology
from lineest.power_flow import Snapshot


def random_radial(rng, n_nodes):
    """Random tree on ``n_nodes`` nodes with a random slack; lines point away from the slack."""
    perm = rng.permutation(n_nodes)
    lines = [(int(perm[rng.integers(0, k)]), int(perm[k])) for k in range(1, n_nodes)]
    topo = build_topology(lines, slack=int(perm[0]), n_nodes=n_nodes)
    params = LineParams(rng.uniform(0.05, 0.5, n_nodes - 1), rng.uniform(0.05, 0.5, n_nodes - 1))
    return topo, params


def random_snapshots(rng, topo, count, with_angles=True):
    """Well-scaled operating points; angles are referenced to the slack."""
    out = []
    for i in range(count):
        theta = rng.uniform(-0.1, 0.1, topo.n_nodes)
        theta[topo.slack] = 0.0
        out.append(Snapshot(f"t{i + 1}", rng.uniform(-1, 1, topo.n_nodes), rng.uniform(-1, 1, topo.n_nodes),
                            rng.uniform(0.9, 1.1, topo.n_nodes), theta if with_angles else None))
    return out


def random_thetas(rng, topo, count):
    out = []
    for _ in range(count):
        th = rng.uniform(-0.1, 0.1, topo.n_nodes)
        th[topo.slack] = 0.0
        out.append(th)
    return out


def max_rel(a, b):
    return float(np.max(np.abs(np.asarray(a) / np.asarray(b) - 1.0)))
