"""Milling chatter stability analysis, online parameter estimation and adaptive spindle-speed control."""
from millstab.closed_loop import RunReport, Scenario, load_scenario, run_scenario
from millstab.controller import ControlDecision, ControllerConfig, optimize_speed
from millstab.dynamics import (
    DelaySimulator,
    OperatingPoint,
    ProcessParameters,
    SimulationDiverged,
    Trajectory,
    directional_matrix,
    engagement_window,
    simulate_dde,
    tooth_angle,
    tooth_period,
)
from millstab.estimation import EstimatedParameters, SensorWindow, estimate_parameters, online_sld
from millstab.roughness import RoughnessModel, extract_features, predict_roughness
from millstab.sdm import SdmConfig, period_transition
from millstab.sld import GridSpec, SldGrid, classify, compute_sld, extract_boundary

__all__ = [
    "ControlDecision", "ControllerConfig", "DelaySimulator", "EstimatedParameters", "GridSpec",
    "OperatingPoint", "ProcessParameters", "RoughnessModel", "RunReport", "Scenario", "SdmConfig",
    "SensorWindow", "SimulationDiverged", "SldGrid", "Trajectory", "classify", "compute_sld",
    "directional_matrix", "engagement_window", "estimate_parameters", "extract_boundary",
    "extract_features", "load_scenario", "online_sld", "optimize_speed", "period_transition",
    "predict_roughness", "run_scenario", "simulate_dde", "tooth_angle", "tooth_period",
]

__version__ = "0.1.0"
