"""Tabular distributional RL with the Quantiled Expansion Mean estimator."""

__version__ = "0.1.0"
