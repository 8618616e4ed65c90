"""Explosion-time distributions of one-dimensional diffusions."""

__version__ = "0.1.0"
