"""Discrete-event simulator for autoscaling mixed interactive/batch LLM serving."""

from .config import ScenarioConfig, bundled_scenario, load_config, parse_config, resolve_config
from .engine import RunResult, Simulator, run
from .workload import Request, RequestClass, ValidationError

__all__ = [
    "Request", "RequestClass", "RunResult", "ScenarioConfig", "Simulator", "ValidationError",
    "bundled_scenario", "load_config", "parse_config", "resolve_config", "run",
]
__version__ = "0.1.0"
