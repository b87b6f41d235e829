"""Hierarchical random switching and baseline stochastic defenses, in NumPy."""

__version__ = "0.1.0"
