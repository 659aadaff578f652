"""Deformable 2D registration with adaptive correspondence scoring."""

__version__ = "0.1.0"
