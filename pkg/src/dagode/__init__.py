"""Causal structure discovery with ODE drifts and differentiable acyclicity."""

__version__ = "0.1.0"
