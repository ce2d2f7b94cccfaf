"""Unfolded WMMSE power allocation for interference networks."""

__version__ = "0.1.0"

from .metrics import UtilityKind, rates, sum_utility, utility_from_name
from .netgen import ChannelState, NetworkTopology, ProblemConfig
from .wmmse import SolveOptions, SolveResult, solve, solve_truncated

__all__ = [
    "__version__",
    "UtilityKind", "rates", "sum_utility", "utility_from_name",
    "ChannelState", "NetworkTopology", "ProblemConfig",
    "SolveOptions", "SolveResult", "solve", "solve_truncated",
]
