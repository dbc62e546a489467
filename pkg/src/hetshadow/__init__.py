"""Shadowing of heteroclinic chains in lattice toy models."""

__version__ = "0.1.0"
