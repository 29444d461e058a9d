"""Misspecified Bayesian learning with action-dependent data."""

__version__ = "0.1.0"
