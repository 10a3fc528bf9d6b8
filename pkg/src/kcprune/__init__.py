"""Kernel cluster pruning for small convolutional networks."""

__version__ = "0.1.0"
