"""Risk-aware decentralized CBF safety filtering for multi-agent navigation."""

from .allocation import pairwise_weights
from .control import Bounds, ControllerKind, centralized_step, decentralized_step
from .core import AgentState, CbfSwarmError, InvalidArgument, LinearConstraint, Mat2, NoiseModel, Scene, Vec2
from .qp import QpProblem, QpSolution, QpStatus, brute_force_solve, solve
from .risk import RiskReport, evaluate_scene_risk, safety_loss, safety_value
from .riskmap import RiskGrid, compute_grid, export_raster, point_risk
from .sim import (Dynamics, Metrics, SimConfig, TrajectoryLog, randomized_ramp_merge, run, scenario_ramp_merge,
                  scenario_swap, step_dynamics)
from .uncertainty import CvarConvention, empirical_cvar, gaussian_cvar

__version__ = "0.1.0"

__all__ = [
    "AgentState", "Bounds", "CbfSwarmError", "ControllerKind", "CvarConvention", "Dynamics", "InvalidArgument",
    "LinearConstraint", "Mat2", "Metrics", "NoiseModel", "QpProblem", "QpSolution", "QpStatus", "RiskGrid",
    "RiskReport", "Scene", "SimConfig", "TrajectoryLog", "Vec2", "brute_force_solve", "centralized_step",
    "compute_grid", "decentralized_step", "empirical_cvar", "evaluate_scene_risk", "export_raster",
    "gaussian_cvar", "pairwise_weights", "point_risk", "randomized_ramp_merge", "run", "safety_loss",
    "safety_value", "scenario_ramp_merge", "scenario_swap", "solve", "step_dynamics",
]
