"""Samplers for exponentially tilted targets built on flow-matching schedules."""

__version__ = "0.1.0"
