"""Desk-scale numerics for random walks in symmetric random media."""

__version__ = "0.1.0"
