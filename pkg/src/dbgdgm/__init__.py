"""Hierarchical deep generative model for multi-subject dynamic graphs."""

__version__ = "0.1.0"
