"""Numerical toolkit for A-free fields, quasiconvexity and relative-entropy stability."""

__version__ = "0.1.0"
