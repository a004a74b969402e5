"""Robust scatter matrices under heavy tails: estimation and large-dimensional prediction."""

from .deterministic import (ContourSpec, DeterministicEquivalent, PopulationModel, TauSplit,
                            detect_isolated_eigenvalue, eta, lambda_fixed_point, predict,
                            predicted_alignment, predicted_density, predicted_stieltjes,
                            solve_tilde_D, solve_U)
from .estimator import (RobustEstimate, RobustScatter, contraction_factor, empirical_alignment,
                        empirical_spectrum, resolvent, solve_robust, trace_map)
from .fixed_point import FixedPointProblem, fixed_point, iterate_bounds, solve, solve_complex
from .stable_metric import (WeightFunction, check_stable_on_grid, get_weight_function,
                            stable_distance, verify_weight_admissibility)

__version__ = "0.1.0"

__all__ = [
    "ContourSpec", "DeterministicEquivalent", "FixedPointProblem", "PopulationModel",
    "RobustEstimate", "RobustScatter", "TauSplit", "WeightFunction", "check_stable_on_grid",
    "contraction_factor", "detect_isolated_eigenvalue", "empirical_alignment",
    "empirical_spectrum", "eta", "fixed_point", "get_weight_function", "iterate_bounds",
    "lambda_fixed_point", "predict", "predicted_alignment", "predicted_density",
    "predicted_stieltjes", "resolvent", "solve", "solve_complex", "solve_robust",
    "solve_tilde_D", "solve_U", "stable_distance", "trace_map", "verify_weight_admissibility",
]
