"""Empirical-likelihood prediction-powered inference."""

__version__ = "0.1.0"
