"""Numerical laboratory for the arbitrage function under model uncertainty."""

__version__ = "0.1.0"
