"""Mixture-of-Universal-Experts building blocks at desk scale."""

__version__ = "0.1.0"
