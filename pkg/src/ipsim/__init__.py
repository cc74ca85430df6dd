"""Simulation and limit theory for mean-field interacting particle systems with
individual and pairwise type changes."""

__version__ = "0.1.0"
