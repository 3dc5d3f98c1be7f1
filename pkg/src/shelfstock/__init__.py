"""Planar shelf-stocking robot: simulator, estimation, control, planning, metrics."""

__version__ = "0.1.0"
