"""Tactile-driven cage deformation of Gaussian-splat scenes."""

__version__ = "0.1.0"
