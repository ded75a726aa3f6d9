"""Stochastic hysteresis: elasticity, conditional dynamics and optimal policies on simulated paths."""

__version__ = "0.1.0"

from .condexp import Conditioner, FeatureSet, PrefixConditioner, make_conditioner, nested_mc
from .dupire import ItoCoefficients, atom_derivatives, dupire_derivatives, vertical_derivative
from .dynamics import (
    ConvergenceError,
    elasticity,
    elasticity_dynamics,
    empirical_coefficients,
    foc_solve,
    pigouvian_tax,
    policy_coefficients,
    residual_coefficients,
    small_eps_check,
    total_derivative,
)
from .functionals import climate, cumulative, kernel_average, make_functional, midpoint, state_dependent, tipping
from .malliavin import clark_ocone_integrand, pathwise_malliavin, tangent_process
from .oracles import oracle_tipping, scenario_tree, tree_optimize
from .timegrid import BrownianEnsemble, ConfigError, TimeGrid, make_grid, sample_brownian

__all__ = [
    "BrownianEnsemble", "Conditioner", "ConfigError", "ConvergenceError", "FeatureSet", "ItoCoefficients",
    "PrefixConditioner", "TimeGrid", "atom_derivatives", "clark_ocone_integrand", "climate", "cumulative",
    "dupire_derivatives", "elasticity", "elasticity_dynamics", "empirical_coefficients", "foc_solve",
    "kernel_average", "make_conditioner", "make_functional", "make_grid", "midpoint", "nested_mc",
    "oracle_tipping", "pathwise_malliavin", "pigouvian_tax", "policy_coefficients", "residual_coefficients",
    "sample_brownian", "scenario_tree", "small_eps_check", "state_dependent", "tangent_process", "tipping",
    "total_derivative", "tree_optimize", "vertical_derivative",
]
