"""Frequency-domain reference fusion, scale-aware modulation and a toy training harness."""

__version__ = "0.1.0"
