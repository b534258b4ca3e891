"""Streaming speech translation simulation engine."""

__version__ = "0.1.0"
