"""Differentiable X-ray rendering and rigid 2D/3D registration."""

__version__ = "0.1.0"
