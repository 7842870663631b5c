"""Numerical laboratory for the Landau-de Gennes Q-tensor model at small elasticity."""

__version__ = "0.1.0"
