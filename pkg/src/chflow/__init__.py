"""Cognitive-hierarchy day-to-day traffic dynamics: simulation, equilibria, stability and calibration."""

__version__ = "0.1.0"

from .framework import ClassFlowState, ClassProfile, DivergenceError, Rates, Trajectory
from .logit import LogitParams
from .network import Network, build_network, cost_jacobian, link_flows, load_scenario, route_costs
from .ntp import NtpParams

__all__ = [
    "ClassFlowState",
    "ClassProfile",
    "DivergenceError",
    "LogitParams",
    "Network",
    "NtpParams",
    "Rates",
    "Trajectory",
    "build_network",
    "cost_jacobian",
    "link_flows",
    "load_scenario",
    "route_costs",
]
