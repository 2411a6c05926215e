"""Radiance fields whose rays render pixel patches, with distance-aware ray convolutions."""

__version__ = "0.1.0"
