"""Probing experts for learning from the weights of a single model layer."""

__version__ = "0.1.0"
