"""Numerical toolkit for the heat equation with interior degenerate diffusion
coefficient |x|^alpha on a square, its regularizations, Carleman weights,
observability estimates and penalized HUM null controls."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConstructionError,
    ConvergenceError,
    NumericalError,
    ValidationError,
)
from .geometry import Annulus, Ball, Box, DomainSpec, Grid, Whole, build_grid, region_mask  # noqa: F401
from .weights import WeightSpec, eval_weight, psi_eps  # noqa: F401
