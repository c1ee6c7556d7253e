"""Staleness-aware temporal graph embedding engine."""

__version__ = "0.1.0"
