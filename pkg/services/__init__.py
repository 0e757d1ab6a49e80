"""Numerical services for the quaternion body-attitude coordination model."""

__version__ = "0.3.0"
