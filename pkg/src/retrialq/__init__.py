"""Matrix-analytic solver, simulator and channel-allocation optimiser for a
two-class priority retrial queue with MMAP arrivals and PH services."""

from .config import config_hash, load_config, baseline
from .errors import (ConfigError, DimensionCapError, InfeasibleError, IrreducibilityError,
                     NonConvergenceError, RetrialQError, SolverError, UndefinedMeasureError)
from .measures import MeasureReport, compute_measures
from .model import (MarkedMAP, ModelConfig, PhaseType, RetrialPH, TruncationPolicy,
                    exponential_config, validate, with_targets)
from .optimize import (OptimizationProblem, OptimizationResult, direct_search, evaluate, pso,
                       simulated_annealing)
from .solver import SteadyState, choose_truncation, direct_solve, solve
from .simulator import SimEstimate, simulate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionCapError", "InfeasibleError", "IrreducibilityError", "MarkedMAP",
    "MeasureReport", "ModelConfig", "NonConvergenceError", "OptimizationProblem",
    "OptimizationResult", "PhaseType", "RetrialPH", "RetrialQError", "SimEstimate",
    "SolverError", "SteadyState", "TruncationPolicy", "UndefinedMeasureError",
    "choose_truncation", "compute_measures", "config_hash", "direct_search", "direct_solve",
    "evaluate", "exponential_config", "load_config", "pso", "baseline", "simulate",
    "simulated_annealing", "solve", "validate", "with_targets",
]
