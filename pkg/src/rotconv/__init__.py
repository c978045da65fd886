"""Rotated line-segment convolutions with angle and arithmetic interpolation."""

__version__ = "0.1.0"
