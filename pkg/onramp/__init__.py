"""Merging-behavior primitives and patterns from freeway on-ramp trajectories."""

__version__ = "0.1.0"
