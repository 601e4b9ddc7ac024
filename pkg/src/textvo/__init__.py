"""Monocular visual odometry with planar text-patch features."""

__version__ = "0.1.0"
