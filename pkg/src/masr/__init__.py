"""Attribute mining and multi-task attribute-scene recognition heads."""

__version__ = "0.1.0"
