"""Constrained approximate optimal transport maps."""

from .config import TOL, Tolerances
from .measure import Coupling, DiscreteMeasure, merge_duplicates, pushforward, second_moment
from .otcore import CostFunction, danskin_subgradient, map_problem_cost, solve_kantorovich, transport_cost

__version__ = "0.1.0"
