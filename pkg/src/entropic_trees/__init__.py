"""Structural-entropy coding trees over time-weighted conversation threads,
with a recursive GRU classifier on top."""

__version__ = "0.1.0"
