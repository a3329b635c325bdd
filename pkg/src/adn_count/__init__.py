"""Counting protocols for anonymous dynamic networks, with a simulation harness."""

__version__ = "0.1.0"
