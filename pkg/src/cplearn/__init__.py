"""Condensed plan-tree preference learning on synthetic reasoning tasks."""

from .env import ArithChain, GridPlan, Problem, State, StepAction, make_env
from .exceptions import (CPLError, ConfigurationError, DegenerateRoundError, DivergenceError,
                         ParseError, PreconditionError, ProtocolError, SearchError,
                         UnavailableError)
from .mcts import PlanTree, PlanTreeSearch, SearchConfig, run_search
from .pipeline import ExperimentConfig, evaluate_policy, run_experiment, run_round
from .policy import PolicyParams, PolicySnapshot
from .prefdata import PairStrategy, PreferencePair, SftTrajectory
from .train import InstanceDPO, StepPreferenceOptimizer, SupervisedPolicy, TrainConfig
from .value_model import StateValueRegressor, ValueParams

__version__ = "0.1.0"

__all__ = [
    "ArithChain", "CPLError", "ConfigurationError", "DegenerateRoundError", "DivergenceError",
    "ExperimentConfig", "GridPlan", "InstanceDPO", "PairStrategy", "ParseError", "PlanTree",
    "PlanTreeSearch", "PolicyParams", "PolicySnapshot", "PreconditionError", "PreferencePair",
    "Problem", "ProtocolError", "SearchConfig", "SearchError", "SftTrajectory", "State",
    "StateValueRegressor", "StepAction", "StepPreferenceOptimizer", "SupervisedPolicy",
    "TrainConfig", "UnavailableError", "ValueParams", "evaluate_policy", "make_env",
    "run_experiment", "run_round", "run_search",
]
