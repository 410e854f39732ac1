"""Desk-scale state-space audio language model."""

__version__ = "0.1.0"
