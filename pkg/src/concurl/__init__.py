"""Consensus clustering with representation learning on feature-vector data."""

__version__ = "0.1.0"
