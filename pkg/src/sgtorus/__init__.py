"""Dual-space particle solver for the periodic semigeostrophic equations on T^2."""

__version__ = "0.1.0"
