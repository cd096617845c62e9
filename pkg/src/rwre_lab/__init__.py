"""Perturbed random walk in random environment: simulation and exact-computation lab."""
__version__ = "0.1.0"
