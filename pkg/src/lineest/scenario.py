"""JSON scenario files: one source of truth for a simulation or estimation run.

Relative paths inside a scenario resolve against the scenario file's
directory. Bundled scenarios can be referenced by name (see
:data:`BUNDLED`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import LineEstError
from .estimators import SolverConfig
from .grid_model import LineParams, PerUnitBase, to_per_unit
from .io import TopologyFile, load_topology, read_snapshots_csv
from .power_flow import NoiseModel, grid_schedule, Injection, synthesize_snapshots, two_instance_schedule

BUNDLED = {
    "district": "district.json",
    "district-campaign": "district_campaign.json",
}


class ScenarioError(LineEstError, ValueError):
    pass


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("lineest") / "data" / BUNDLED[name]))


def _values(spec):
    """A list of numbers, or ``{"min", "max", "step"}`` expanded inclusively."""
    if isinstance(spec, dict):
        lo, hi, step = float(spec["min"]), float(spec["max"]), float(spec["step"])
        n = int(round((hi - lo) / step)) + 1
        return list(lo + step * np.arange(n))
    if isinstance(spec, (int, float)):
        return [float(spec)]
    return [float(v) for v in spec]


@dataclass
class Scenario:
    data: dict
    root: Path
    seed: int = 0
    output_dir: Path = field(default_factory=lambda: Path("out"))

    @property
    def name(self) -> str:
        return self.data.get("name", "scenario")

    # -- grid -------------------------------------------------------------
    def topology_file(self) -> TopologyFile:
        if not hasattr(self, "_topo"):
            path = self.root / self.data["topology"]
            if not path.exists():
                raise ScenarioError(f"topology file {path} not found")
            self._topo = load_topology(path)
        return self._topo

    @property
    def topology(self):
        return self.topology_file().topology

    @property
    def base(self) -> PerUnitBase:
        b = self.data.get("base", {})
        return PerUnitBase(float(b.get("s_base_va", 10_000.0)), float(b.get("v_base_v", 400.0)))

    @property
    def slack_voltage(self) -> float:
        return float(self.data.get("slack_voltage_pu", 1.0))

    @property
    def pmu(self) -> bool:
        return bool(self.data.get("pmu", False))

    def datasheet(self) -> LineParams:
        return to_per_unit(self.topology_file().datasheet_ohm, self.base)

    def truth(self) -> LineParams:
        """True parameters (pu): explicit, or the datasheet uniformly perturbed with the scenario seed."""
        spec = self.data.get("truth")
        if spec is None:
            raise ScenarioError("scenario has no 'truth' section")
        ds = self.datasheet()
        if "lines" in spec:
            lines = spec["lines"]
            if len(lines) != ds.n_lines:
                raise ScenarioError("truth lists the wrong number of lines")
            ohm = LineParams([float(l["r_ohm"]) for l in lines], [float(l["x_ohm"]) for l in lines])
            return to_per_unit(ohm, self.base)
        frac = float(spec.get("perturbation", 0.0))
        rng = np.random.default_rng(int(spec.get("seed", self.seed)))
        r = ds.r * (1.0 + rng.uniform(-frac, frac, ds.n_lines))
        x = ds.x * (1.0 + rng.uniform(-frac, frac, ds.n_lines))
        return LineParams(r, x)

    # -- measurements -----------------------------------------------------
    @property
    def has_schedule(self) -> bool:
        return "schedule" in self.data

    def schedule(self) -> list[Injection]:
        spec = self.data.get("schedule")
        if spec is None:
            raise ScenarioError("scenario has no injection schedule")
        topo = self.topology
        s_base = self.base.s_base
        nodes = [int(k) - 1 for k in spec.get("nodes", [k + 1 for k in topo.non_slack])]
        kind = spec.get("kind")
        if kind == "two_instance":
            return two_instance_schedule(topo, nodes, float(spec["p_w"]) / s_base, float(spec["q_var"]) / s_base,
                                         float(spec.get("ratio", -1.0)))
        if kind == "grid":
            p = [v / s_base for v in _values(spec["p_w"])]
            q = [v / s_base for v in _values(spec["q_var"])]
            return grid_schedule(topo, nodes, p, q)
        if kind == "explicit":
            out = []
            for i, e in enumerate(spec["entries"]):
                p = np.asarray(e["p_w"], dtype=float) / s_base
                q = np.asarray(e["q_var"], dtype=float) / s_base
                if p.shape != (topo.n_nodes,) or q.shape != (topo.n_nodes,):
                    raise ScenarioError("explicit schedule entries need one value per node")
                out.append(Injection(str(e.get("t", f"t{i + 1}")), p, q))
            return out
        raise ScenarioError(f"unknown schedule kind {kind!r}")

    def noise(self, zero: bool = False) -> NoiseModel:
        spec = {} if zero else self.data.get("noise", {})
        return NoiseModel(float(spec.get("vmag_rel_sigma", 0.0)),
                          float(spec.get("pq_sigma_w", 0.0)) / self.base.s_base,
                          float(spec.get("theta_sigma_rad", 0.0)), seed=self.seed)

    def snapshots(self, noiseless: bool = False):
        """Measured snapshots (CSV) or synthetic ones from the schedule at the true parameters."""
        if "measurements" in self.data:
            path = self.root / self.data["measurements"]
            if not path.exists():
                raise ScenarioError(f"measurement file {path} not found")
            return read_snapshots_csv(path, self.base, self.topology.n_nodes)
        return synthesize_snapshots(self.topology, self.truth(), self.schedule(), self.noise(zero=noiseless),
                                    self.slack_voltage, pmu=self.pmu)

    # -- solver -----------------------------------------------------------
    @property
    def method(self) -> str:
        return self.data.get("estimator", {}).get("method", "nr-rms")

    def solver_config(self, method: str | None = None) -> SolverConfig:
        spec = dict(self.data.get("estimator", {}))
        spec.pop("method", None)
        method = method or self.method
        regime = spec.pop("regime", "pmu" if method == "nr-square" else ("pmu" if self.pmu and method != "nr-rms" else "rms"))
        try:
            return SolverConfig(regime=regime, **spec)
        except TypeError as exc:
            raise ScenarioError(f"bad estimator settings: {exc}") from exc

    def sweep(self, name: str) -> dict:
        return dict(self.data.get("sweeps", {}).get(name, {}))


def load_scenario(path_or_name, seed: int | None = None, output_dir=None) -> Scenario:
    """Load a scenario file (or bundled scenario name) and apply overrides."""
    if str(path_or_name) in BUNDLED:
        path = bundled_path(str(path_or_name))
    else:
        path = Path(path_or_name)
    if not path.exists():
        raise ScenarioError(f"scenario file {path} not found")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from exc
    if ("schedule" in data) == ("measurements" in data):
        raise ScenarioError("a scenario needs exactly one of 'schedule' or 'measurements'")
    if "topology" not in data:
        raise ScenarioError("scenario has no 'topology' entry")
    sc = Scenario(data, path.parent.resolve(),
                  seed=int(seed if seed is not None else data.get("seed", 0)),
                  output_dir=Path(output_dir if output_dir is not None else data.get("output_dir", "out")))
    sc.topology_file()
    return sc
