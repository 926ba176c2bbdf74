"""Inertial-only dead reckoning for wheeled vehicles with a learned noise adapter."""

__version__ = "0.1.0"
