"""Diffusion classifier with dataset-specific noise optimisation at toy scale."""

__version__ = "0.1.0"
