"""Stochastic digital twin of sub-shot-noise atom-number stabilization."""

__version__ = "0.1.0"
