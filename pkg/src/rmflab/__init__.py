"""Numerical laboratory for random magnetic Schroedinger operators in two dimensions."""

__version__ = "0.1.0"
