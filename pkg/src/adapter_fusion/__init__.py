"""Continual learning with a single Fisher-fused global adapter."""

__version__ = "0.1.0"
