"""Transformer narrative generation with discrete per-entity states."""

__version__ = "0.1.0"
