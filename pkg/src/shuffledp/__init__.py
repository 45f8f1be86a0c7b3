"""Shuffled-Gaussian differential privacy: mechanism bounds, accountant, and a
desk-scale shuffled-DPSGD trainer on hand-built MLP / attention blocks."""

__version__ = "0.1.0"

from .accountant import (
    Budget,
    InfeasibleBudgetError,
    MechanismSpec,
    ShuffleBound,
    amplify_by_subsampling,
    compose_advanced,
    fallback_check,
    gaussian_delta,
    invert_amplification,
    shuffle_bound,
    shuffled_delta,
    solve_sigma,
    solve_sigma_single,
)
from .lognormal import LognormalSumApprox, fw_approx, mc_sum_cdf, std_normal_cdf

__all__ = [
    "Budget",
    "InfeasibleBudgetError",
    "LognormalSumApprox",
    "MechanismSpec",
    "ShuffleBound",
    "amplify_by_subsampling",
    "compose_advanced",
    "fallback_check",
    "fw_approx",
    "gaussian_delta",
    "invert_amplification",
    "mc_sum_cdf",
    "shuffle_bound",
    "shuffled_delta",
    "solve_sigma",
    "solve_sigma_single",
    "std_normal_cdf",
]
