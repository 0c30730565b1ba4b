"""Desk-scale mixture-of-experts design-space experiments."""

__version__ = "0.1.0"
