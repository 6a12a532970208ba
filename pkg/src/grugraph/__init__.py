"""Gradient-regularized message passing on heterogeneous graphs."""

__version__ = "0.1.0"
