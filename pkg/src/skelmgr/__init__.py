"""Multi-concern autonomic management of behavioural skeletons, simulated."""

from .consensus import Concern, CoordinationMode, Coordinator, resolve
from .graph import ApplicationGraph, Farm, GraphDelta, Pipeline, Seq, apply_delta, diff, expand, validate
from .managers import MinThroughput, PowerBudget, SecureData, initialize
from .scenario import Scenario
from .session import Session, run_scenario, verdict_from_trace
from .sim import Resource, SimConfig, WorkloadPhase, World

__version__ = "0.1.0"

__all__ = [
    "ApplicationGraph", "Concern", "CoordinationMode", "Coordinator", "Farm", "GraphDelta",
    "MinThroughput", "Pipeline", "PowerBudget", "Resource", "Scenario", "SecureData", "Seq",
    "Session", "SimConfig", "WorkloadPhase", "World", "apply_delta", "diff", "expand",
    "initialize", "resolve", "run_scenario", "validate", "verdict_from_trace",
]
