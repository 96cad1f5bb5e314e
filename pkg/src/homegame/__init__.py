"""Household text-game simulator with plan/eliminate/track assist modules."""

__version__ = "0.1.0"
