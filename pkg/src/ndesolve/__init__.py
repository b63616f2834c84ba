"""Differentiable differential-equation solvers built on numpy."""

__version__ = "0.1.0"
