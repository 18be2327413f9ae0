"""Hierarchical brain parcellation from orthogonal 2D planes."""

__version__ = "0.1.0"
