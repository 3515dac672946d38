"""Differentiable camera pipelines and dataset-drift controls."""

__version__ = "0.1.0"
