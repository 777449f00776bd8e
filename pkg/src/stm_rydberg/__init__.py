"""Spatiotemporally multiplexed Rydberg receiver simulation."""

__version__ = "0.1.0"
