"""Optimal consumption and investment under Heston stochastic volatility."""
from .closed_form_policy import (PolicyComponents, crra_policy, evolve_wealth, hara_policy,
                                 theta_u_closed_form)
from .errors import (AllocatorError, InvalidParameters, LengthMismatch, NumericalFailure,
                     WealthBelowFloor)
from .market_model import (CALIBRATED_PARAMS, HestonModel, HestonParams, MarketPath,
                           path_from_increments, simulate_heston_path)
from .utility import UtilitySpec

__all__ = [
    "AllocatorError", "CALIBRATED_PARAMS", "HestonModel", "HestonParams", "InvalidParameters",
    "LengthMismatch", "MarketPath", "NumericalFailure", "PolicyComponents", "UtilitySpec",
    "WealthBelowFloor", "crra_policy", "evolve_wealth", "hara_policy", "path_from_increments",
    "simulate_heston_path", "theta_u_closed_form",
]
