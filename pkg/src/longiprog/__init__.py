"""Progression prediction from irregularly spaced longitudinal fundus images."""

__version__ = "0.1.0"
