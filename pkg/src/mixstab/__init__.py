"""Equilibria and linear stability of Richardson-number mixing closures for the
ocean surface boundary layer, with a nonlinear column solver to check them."""

from .closures import PRESETS, ClosureModel, Coefficients, ModelKind, PhysicalConstants, invalid_interval
from .column import Grid, SimConfig, run_perturbation_experiment
from .equilibrium import (
    Boundary,
    Equilibrium,
    FixedPointProblem,
    Forcing,
    build_equilibrium,
    equilibrium_at,
    solve_fixed_points,
)
from .stability import Classification, assemble_matrix, classify, eigenvalues, stability_map

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ClosureModel",
    "Coefficients",
    "ModelKind",
    "PhysicalConstants",
    "invalid_interval",
    "Grid",
    "SimConfig",
    "run_perturbation_experiment",
    "Boundary",
    "Equilibrium",
    "FixedPointProblem",
    "Forcing",
    "build_equilibrium",
    "equilibrium_at",
    "solve_fixed_points",
    "Classification",
    "assemble_matrix",
    "classify",
    "eigenvalues",
    "stability_map",
]
