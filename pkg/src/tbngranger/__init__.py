"""Time-respecting Bayesian-network Granger causality for tensor time series."""

__version__ = "0.1.0"
