"""Hierarchical object re-identification with attribute-routed small networks."""

__version__ = "0.1.0"
