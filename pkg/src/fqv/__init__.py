"""Pathwise (Follmer) integration along partitions: a numerical laboratory."""

__version__ = "0.1.0"
