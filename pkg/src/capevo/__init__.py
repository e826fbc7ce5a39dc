"""Governed, versioned capability modules that learn while the agent stays fixed."""

from .config import ExperimentPlan, load_plan, parse_plan
from .driver import run_experiment
from .registry import Registry

__all__ = ["ExperimentPlan", "Registry", "load_plan", "parse_plan", "run_experiment"]
__version__ = "0.1.0"
