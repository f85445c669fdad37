"""Condition-drift evaluation for autoencoder reconstructions."""

__version__ = "0.1.0"
