"""Line impedance estimation for radial distribution grids from nodal measurements."""
from .errors import (
    LineEstError,
    NoConvergence,
    RankDeficient,
    SingularJacobian,
)
from .estimators import EstimateReport, EstimationProblem, SolverConfig, estimate
from .grid_model import GridTopology, LineParams, PerUnitBase, build_admittance, build_topology
from .power_flow import NoiseModel, Snapshot, solve_load_flow, synthesize_snapshots
from .sensitivity import Regime, assemble_jacobian, fd_check

__all__ = [
    "EstimateReport",
    "EstimationProblem",
    "GridTopology",
    "LineEstError",
    "LineParams",
    "NoConvergence",
    "NoiseModel",
    "PerUnitBase",
    "RankDeficient",
    "Regime",
    "SingularJacobian",
    "Snapshot",
    "SolverConfig",
    "assemble_jacobian",
    "build_admittance",
    "build_topology",
    "estimate",
    "fd_check",
    "solve_load_flow",
    "synthesize_snapshots",
]

__version__ = "0.1.0"
