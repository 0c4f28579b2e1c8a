"""Distributed Kalman-like observer in information form with distributed correction solvers."""

from .errors import DkobsError
from .model import AgentModel, Measurements, NetworkModel, RelativeMeasurement, double_integrator
from .observer import InfoContributions, InformationObserver, make_forgetting
from .solvers import AdmmSolver, ResidualSplitSolver, RichardsonSolver, solve_centralized
from .topology import SensingTopology, build_dual_layout, build_topology

__all__ = [
    "AdmmSolver",
    "AgentModel",
    "DkobsError",
    "InfoContributions",
    "InformationObserver",
    "Measurements",
    "NetworkModel",
    "RelativeMeasurement",
    "ResidualSplitSolver",
    "RichardsonSolver",
    "SensingTopology",
    "build_dual_layout",
    "build_topology",
    "double_integrator",
    "make_forgetting",
    "solve_centralized",
]
