"""Delayed-feedback post-click GMV prediction lab."""

__version__ = "0.1.0"
