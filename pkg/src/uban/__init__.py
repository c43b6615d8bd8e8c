"""Uncertainty-boosted activity anticipation toolkit."""

__version__ = "0.1.0"
