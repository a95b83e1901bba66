"""Spectral simulation of a 3-D stochastic wave equation with spatially coloured noise."""
from .grid import Box, Field, Grid
from .kernel import InitialData, dalang_integral, kernel_multiplier
from .noise import CovarianceError, CovarianceSpec, sample_field, spectral_density
from .solver import Coefficient, CoefficientSpec, Control, SolverConfig, Trajectory, picard_solve, solve, step

__all__ = [
    "Box",
    "Coefficient",
    "CoefficientSpec",
    "Control",
    "CovarianceError",
    "CovarianceSpec",
    "Field",
    "Grid",
    "InitialData",
    "SolverConfig",
    "Trajectory",
    "dalang_integral",
    "kernel_multiplier",
    "picard_solve",
    "sample_field",
    "solve",
    "spectral_density",
    "step",
]
