"""Pathwise simulation of the stochastic total-variation flow with transport noise."""

__version__ = "0.1.0"
