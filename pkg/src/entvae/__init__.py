"""Entanglement classification of two-qubit states with a beta-VAE classifier."""

__version__ = "0.1.0"
