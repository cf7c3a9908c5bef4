"""Exact sampling and potential-theory diagnostics for Neumann stochastic heat systems."""

__version__ = "0.1.0"
