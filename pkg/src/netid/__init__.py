"""Online distributed identification of networked input-output maps with
a projected-gradient predictive controller on top."""

from .control import ControlSet, LossSpec, Trajectory, project, run_controller
from .distributed import OnlineIdentifier
from .graph import Topology, WeightMatrix, build_laplacian, build_weights, verify_nullspace
from .identify import IdentProblem, StackedState, StepSchedule, check_lemma1, hindsight_optimum, regret
from .maps import CplMap, LinearMap, ModelLayout
from .plant import Feeder, FeederPlant, solve_power_flow
from .scenario import ConfigError, Scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ControlSet", "CplMap", "Feeder", "FeederPlant", "IdentProblem", "LinearMap", "LossSpec",
    "ModelLayout", "OnlineIdentifier", "Scenario", "StackedState", "StepSchedule", "Topology", "Trajectory",
    "WeightMatrix", "build_laplacian", "build_weights", "check_lemma1", "hindsight_optimum", "load_scenario",
    "project", "regret", "run_controller", "solve_power_flow", "verify_nullspace",
]
