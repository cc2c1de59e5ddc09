"""Federated prototype rectification with personalization on a numpy MLP."""

__version__ = "0.1.0"
