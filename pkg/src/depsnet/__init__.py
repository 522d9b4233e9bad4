"""Delayed epsilon-shrinking once-for-all supernet training at desk scale."""

__version__ = "0.1.0"
