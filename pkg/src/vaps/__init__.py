"""Desk-scale compositional zero-shot learning lab."""

__version__ = "0.1.0"
