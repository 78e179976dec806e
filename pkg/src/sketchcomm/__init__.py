"""Emergent sketch communication: agents that learn to draw to be understood."""

__version__ = "0.1.0"
