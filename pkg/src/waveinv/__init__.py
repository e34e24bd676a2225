"""Quadratic-gradient wave models: forward solvers, probes, and recovery."""

__version__ = "0.1.0"
