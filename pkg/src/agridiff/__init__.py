"""Differentiable crop modelling: autodiff tape, crop model, networks and hybrids."""

__version__ = "0.1.0"
