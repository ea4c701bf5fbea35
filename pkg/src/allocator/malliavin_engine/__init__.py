"""Monte Carlo machinery for optimal policies in incomplete diffusion markets."""
from .blocks import BuildingBlockState, PathSample, advance_blocks, initial_state, simulate_blocks
from .fields import AnalyticThetaU, FieldOutOfRange, ThetaUField, ZeroThetaU
from .functionals import GammaUpsilon, HaraMoments, gamma_upsilon, ratio_estimate, weighted_mean
from .policy import MCConfig, mc_policy_components, solve_lambda

__all__ = [
    "AnalyticThetaU", "BuildingBlockState", "FieldOutOfRange", "GammaUpsilon", "HaraMoments",
    "MCConfig", "PathSample", "ThetaUField", "ZeroThetaU", "advance_blocks", "gamma_upsilon",
    "initial_state", "mc_policy_components", "ratio_estimate", "simulate_blocks", "solve_lambda",
    "weighted_mean",
]
from .solver import SolverGrid, heston_grid, residual_diagnostics, solve_theta_u  # noqa: E402

__all__ += ["SolverGrid", "heston_grid", "residual_diagnostics", "solve_theta_u"]
