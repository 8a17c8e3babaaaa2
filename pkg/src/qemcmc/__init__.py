"""Numerical workbench for quantum-proposal Markov chain Monte Carlo on Ising models."""

__version__ = "0.1.0"
