"""Deterministic discrete-event harness for whole-network scenarios."""

from .events import Channel, EventLoop, Latency
from .measure import measure
from .runner import RunReport, Simulation, run_scenario
from .scenario import Scenario, ScenarioError, load_scenario, validate_scenario

__all__ = [
    "Channel",
    "EventLoop",
    "Latency",
    "RunReport",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "load_scenario",
    "measure",
    "run_scenario",
    "validate_scenario",
]
