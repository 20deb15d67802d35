"""Spectral-filter view of dataset distillation and curriculum frequency matching."""

__version__ = "0.1.0"
