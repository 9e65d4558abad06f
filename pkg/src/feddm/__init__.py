"""Desk-scale federated learning with distribution-matched synthetic data."""

__version__ = "0.1.0"
