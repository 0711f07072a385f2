"""Simulation and Lyapunov-based verification of sampled-data control systems."""

__version__ = "0.1.0"
