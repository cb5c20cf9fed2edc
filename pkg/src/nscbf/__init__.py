"""Non-smooth stochastic control barrier functions: barrier trees, a min-norm QP safety filter
and seeded Monte Carlo evaluation for control-affine SDEs."""

__version__ = "0.1.0"

from .barrier_tree import (AlmostActiveSet, BarrierTree, KeepInDisk, KeepOutDisk, Leaf, Max, Min,
                           PairwiseSeparation, active_leaf, almost_active, evaluate, min_tree)
from .config import RunConfig, parse_config
from .dynamics import (ExitEvent, SDEModel, Trajectory, euler_maruyama_step, joint_model, simulate,
                       single_integrator)
from .errors import (BarrierSingularityError, ConfigError, ControllerError, DimensionError,
                     InfeasibleQPError, NSCBFError, SimulationError)
from .montecarlo import MonteCarloSummary, TrialResult, run_trials, simulate_batch, switching_metric
from .qp_solver import QPProblem, QPSolution, solve_qp, verify_kkt
from .safety_filter import Box, ClassK, SafetyFilter, constraint_row, filter_control, solve_filter
from .scenarios import Scenario, multi_agent_swap, single_agent_boolean

__all__ = [
    "AlmostActiveSet", "BarrierTree", "KeepInDisk", "KeepOutDisk", "Leaf", "Max", "Min", "PairwiseSeparation",
    "active_leaf", "almost_active", "evaluate", "min_tree", "RunConfig", "parse_config", "ExitEvent",
    "SDEModel", "Trajectory", "euler_maruyama_step", "joint_model", "simulate", "single_integrator",
    "BarrierSingularityError", "ConfigError", "ControllerError", "DimensionError", "InfeasibleQPError",
    "NSCBFError", "SimulationError", "MonteCarloSummary", "TrialResult", "run_trials", "simulate_batch",
    "switching_metric", "QPProblem", "QPSolution", "solve_qp", "verify_kkt", "Box", "ClassK",
    "SafetyFilter", "constraint_row", "filter_control", "solve_filter", "Scenario", "multi_agent_swap",
    "single_agent_boolean",
]
