"""Landmark detection with super-resolution heatmap heads, in NumPy."""

__version__ = "0.1.0"
