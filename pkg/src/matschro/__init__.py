"""Numerical checks for matrix Schrodinger operators div(Q grad u) + (V - v I) u on a truncated box."""

__version__ = "0.1.0"

from .expr import ExprSyntaxError, PotentialExpr, parse
from .grid import DiscreteOperator, GridSpec, assemble, build_grid, discrete_norm
from .model import CheckReport, DiffusionField, MatrixField, Sampling, SystemSpec, Verdict

__all__ = [
    "CheckReport", "DiffusionField", "DiscreteOperator", "ExprSyntaxError", "GridSpec", "MatrixField",
    "PotentialExpr", "Sampling", "SystemSpec", "Verdict", "assemble", "build_grid", "discrete_norm", "parse",
]
