"""
backmc - backward Monte Carlo pricing of path-dependent options.
Chains come from recursive marginal quantization or from tridiagonal generators.
"""

__version__ = "0.3.0"
__author__ = "backmc Team"

from .chain import ChainApproximation, PathSet, reverse_transitions, sample_backward, sample_forward
from .exceptions import BackMCError, ConfigurationError, NumericalError, SolverError, ValidationError
from .generator import ltsa_build
from .model import ModelSpec, TimeGrid
from .payoffs import PayoffSpec, payoff_eval
from .pricing import PriceEstimate, make_plan, price_backward, price_euler, price_forward
from .quantize import rmqa_build
from .runner import ExperimentRunner

__all__ = [
    "BackMCError",
    "ChainApproximation",
    "ConfigurationError",
    "ExperimentRunner",
    "ModelSpec",
    "NumericalError",
    "PathSet",
    "PayoffSpec",
    "PriceEstimate",
    "SolverError",
    "TimeGrid",
    "ValidationError",
    "ltsa_build",
    "make_plan",
    "payoff_eval",
    "price_backward",
    "price_euler",
    "price_forward",
    "reverse_transitions",
    "rmqa_build",
    "sample_backward",
    "sample_forward",
]
