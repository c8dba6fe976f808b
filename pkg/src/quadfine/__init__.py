"""Quadtree-sparse mask refinement on synthetic shape data."""

__version__ = "0.1.0"
