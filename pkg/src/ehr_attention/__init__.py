"""Hierarchical attention mortality model for ICU stays, with attribution and fidelity tooling."""

__version__ = "0.1.0"
